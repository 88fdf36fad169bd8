//! Residual convolutional encoder emitting four feature levels at strides
//! {4, 8, 16, 32}, with configurable per-stage block counts so depth can be
//! shifted toward the early stages at matched capacity.

use rand_chacha::ChaCha8Rng;

use crate::blocks::SsHead;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Params};
use crate::tensor::{Graph, Tensor};

/// Stage layout of the encoder: block counts and widths for the four stages
/// plus the stem width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct StagePlan {
    pub blocks: [usize; 4],
    pub widths: [usize; 4],
    pub stem_width: usize,
}

impl StagePlan {
    pub fn new(blocks: [usize; 4], widths: [usize; 4], stem_width: usize) -> Result<Self> {
        if blocks.iter().any(|&b| b == 0) || widths.iter().any(|&w| w == 0) || stem_width == 0 {
            return Err(Error::Config(
                "stage plan needs positive block counts and widths".into(),
            ));
        }
        Ok(StagePlan {
            blocks,
            widths,
            stem_width,
        })
    }

    /// Baseline depth allocation at toy scale, bottom-heavy in stage 3.
    pub fn baseline() -> Self {
        StagePlan {
            blocks: [2, 2, 4, 2],
            widths: [12, 16, 24, 32],
            stem_width: 12,
        }
    }

    /// Shift depth toward the early stages, rescaling widths so the
    /// parameter count stays within 10% of this plan's.
    pub fn rearranged(&self) -> Self {
        let target = self.param_count();
        let blocks = [3, 3, 2, 2];
        let mut best: Option<(u64, StagePlan)> = None;
        let mut s = 0.5;
        while s <= 1.5 {
            let widths = self.widths.map(|w| (((w as f64) * s).round() as usize).max(4));
            let plan = StagePlan {
                blocks,
                widths,
                stem_width: self.stem_width,
            };
            let diff = plan.param_count().abs_diff(target) as u64;
            if best.as_ref().is_none_or(|(d, _)| diff < *d) {
                best = Some((diff, plan));
            }
            s += 0.005;
        }
        best.expect("non-empty search range").1
    }

    /// Closed-form trainable parameter count of the encoder this plan builds:
    /// stem conv + per-block (two BNs, two 3×3 convs, optional projection).
    pub fn param_count(&self) -> usize {
        let mut total = 3 * self.stem_width * 9; // stem conv, no bias
        let mut cin = self.stem_width;
        for stage in 0..4 {
            let w = self.widths[stage];
            for block in 0..self.blocks[stage] {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                total += 2 * cin; // bn1
                total += cin * w * 9; // conv1
                total += 2 * w; // bn2
                total += w * w * 9; // conv2
                if cin != w || stride != 1 {
                    total += cin * w; // 1x1 projection
                }
                cin = w;
            }
        }
        total
    }
}

/// Pre-activation residual block: BN→ReLU→conv3×3→BN→ReLU→conv3×3 plus the
/// identity, projected 1×1 when the width or stride changes. The second BN
/// starts at gamma 0 so a fresh block is the identity map.
pub struct ResidualBlock {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, width: usize, stride: usize) -> Self {
        ResidualBlock {
            bn1: BatchNorm::new(cin),
            conv1: Conv2d::new(rng, cin, width, 3, 3, stride, 1, false),
            bn2: BatchNorm::with_gamma(width, 0.0),
            conv2: Conv2d::new(rng, width, width, 3, 3, 1, 1, false),
            proj: (cin != width || stride != 1)
                .then(|| Conv2d::new(rng, cin, width, 1, 1, stride, 0, false)),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = g.relu(&self.bn1.forward(g, x, training)?)?;
        let y = self.conv1.forward(g, &h)?;
        let y = g.relu(&self.bn2.forward(g, &y, training)?)?;
        let y = self.conv2.forward(g, &y)?;
        let short = match &self.proj {
            Some(p) => p.forward(g, &h)?,
            None => x.clone(),
        };
        g.add(&y, &short)
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        self.bn1.collect(&format!("{prefix}.bn1"), params);
        self.conv1.collect(&format!("{prefix}.conv1"), params);
        self.bn2.collect(&format!("{prefix}.bn2"), params);
        self.conv2.collect(&format!("{prefix}.conv2"), params);
        if let Some(p) = &self.proj {
            p.collect(&format!("{prefix}.proj"), params);
        }
    }
}

/// Encoder forward results: four feature levels (strides 4/8/16/32) and,
/// when semantic supervision heads are attached and in use, their
/// per-stage class logits.
pub struct EncoderOut {
    pub feats: Vec<Tensor>,
    pub ss_logits: Option<Vec<Tensor>>,
}

/// Stem (3×3 stride-2 conv then 2×2 max-reduce) followed by four residual
/// stages. Stage 1 keeps the stem stride; stages 2–4 halve resolution.
pub struct Encoder {
    pub plan: StagePlan,
    stem: Conv2d,
    stages: Vec<Vec<ResidualBlock>>,
    ss_heads: Option<Vec<SsHead>>,
}

impl Encoder {
    pub fn new(rng: &mut ChaCha8Rng, plan: StagePlan) -> Self {
        let stem = Conv2d::new(rng, 3, plan.stem_width, 3, 3, 2, 1, false);
        let mut stages = Vec::with_capacity(4);
        let mut cin = plan.stem_width;
        for stage in 0..4 {
            let w = plan.widths[stage];
            let mut blocks = Vec::with_capacity(plan.blocks[stage]);
            for block in 0..plan.blocks[stage] {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(rng, cin, w, stride));
                cin = w;
            }
            stages.push(blocks);
        }
        Encoder {
            plan,
            stem,
            stages,
            ss_heads: None,
        }
    }

    /// Attach an auxiliary classification head to the tail of each stage.
    /// Head widths default to the stage width, so the fusion path sees the
    /// same channel counts whether it reads taps or raw stage outputs.
    pub fn attach_semantic_supervision(&mut self, rng: &mut ChaCha8Rng, classes: usize) {
        let heads = (0..4)
            .map(|i| {
                let w = self.plan.widths[i];
                SsHead::new(rng, w, w, w, classes)
            })
            .collect();
        self.ss_heads = Some(heads);
    }

    pub fn has_ss(&self) -> bool {
        self.ss_heads.is_some()
    }

    /// Channel count of the level-`i` (0-based) feature the decoder sees.
    pub fn feat_channels(&self, i: usize, use_taps: bool) -> usize {
        match (&self.ss_heads, use_taps) {
            (Some(heads), true) => heads[i].tap_channels,
            _ => self.plan.widths[i],
        }
    }

    /// Run the stem and stages. With `use_taps` set (and heads attached) the
    /// returned features are the supervision taps and the per-stage class
    /// logits are included; otherwise the raw stage outputs come back and no
    /// head is evaluated.
    pub fn forward(&self, g: &Graph, images: &Tensor, training: bool, use_taps: bool) -> Result<EncoderOut> {
        if use_taps && self.ss_heads.is_none() {
            return Err(Error::arg(
                "encoder",
                "semantic supervision requested but no heads attached",
            ));
        }
        let mut x = self.stem.forward(g, images)?;
        x = g.max_pool2(&x)?;
        let mut feats = Vec::with_capacity(4);
        let mut ss_logits = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, &x, training)?;
            }
            if use_taps {
                let (logits, tap) = self.ss_heads.as_ref().unwrap()[i].forward(g, &x, training)?;
                ss_logits.push(logits);
                feats.push(tap);
            } else {
                feats.push(x.clone());
            }
        }
        Ok(EncoderOut {
            feats,
            ss_logits: use_taps.then_some(ss_logits),
        })
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        self.stem.collect(&format!("{prefix}.stem"), params);
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.collect(&format!("{prefix}.stage{}.block{b}", i + 1), params);
            }
        }
        if let Some(heads) = &self.ss_heads {
            for (i, head) in heads.iter().enumerate() {
                head.collect(&format!("{prefix}.ss{}", i + 1), params);
            }
        }
    }
}
