//! The named fusion components: global-convolution blocks, boundary
//! refinement, semantic supervision heads, the semantic embedding branch,
//! explicit channel-resolution embedding and densely adjacent prediction.
//!
//! Blocks are immutable after construction; forward passes are pure graph
//! building. Parameters mutate only through the optimizer between steps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Deconv2d, Params};
use crate::tensor::{Graph, Shape, Tensor};

/// Large-kernel block: sum of a (k×1 then 1×k) path and a (1×k then k×1)
/// path, both padded to preserve the spatial size. No nonlinearity inside.
pub struct GcnBlock {
    a1: Conv2d,
    a2: Conv2d,
    b1: Conv2d,
    b2: Conv2d,
    pub k: usize,
}

impl GcnBlock {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::arg("gcn_block", format!("kernel {k} must be odd")));
        }
        let half = k / 2;
        Ok(GcnBlock {
            a1: Conv2d::rect(rng, cin, cout, k, 1, 1, half, 0, true),
            a2: Conv2d::rect(rng, cout, cout, 1, k, 1, 0, half, true),
            b1: Conv2d::rect(rng, cin, cout, 1, k, 1, 0, half, true),
            b2: Conv2d::rect(rng, cout, cout, k, 1, 1, half, 0, true),
            k,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let a = self.a2.forward(g, &self.a1.forward(g, x)?)?;
        let b = self.b2.forward(g, &self.b1.forward(g, x)?)?;
        g.add(&a, &b)
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        self.a1.collect(&format!("{prefix}.a1"), params);
        self.a2.collect(&format!("{prefix}.a2"), params);
        self.b1.collect(&format!("{prefix}.b1"), params);
        self.b2.collect(&format!("{prefix}.b2"), params);
    }
}

/// Residual refinement: `x + conv3x3(relu(conv3x3(x)))`, channel- and
/// spatial-preserving.
pub struct BoundaryRefine {
    c1: Conv2d,
    c2: Conv2d,
}

impl BoundaryRefine {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        BoundaryRefine {
            c1: Conv2d::new(rng, channels, channels, 3, 3, 1, 1, true),
            c2: Conv2d::new(rng, channels, channels, 3, 3, 1, 1, true),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let r = self.c2.forward(g, &g.relu(&self.c1.forward(g, x)?)?)?;
        g.add(x, &r)
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        self.c1.collect(&format!("{prefix}.c1"), params);
        self.c2.collect(&format!("{prefix}.c2"), params);
    }
}

/// Auxiliary classification head attached to an encoder stage. Two
/// conv3x3+BN+ReLU stacks, global average pooling and a 1×1 classifier.
/// The output of the second conv stack is the `tap`: the feature the fusion
/// path extracts instead of the raw stage output when semantic supervision
/// is enabled.
pub struct SsHead {
    c1: Conv2d,
    bn1: BatchNorm,
    c2: Conv2d,
    bn2: BatchNorm,
    cls: Conv2d,
    pub tap_channels: usize,
}

impl SsHead {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, hidden: usize, tap: usize, classes: usize) -> Self {
        SsHead {
            c1: Conv2d::new(rng, cin, hidden, 3, 3, 1, 1, false),
            bn1: BatchNorm::new(hidden),
            c2: Conv2d::new(rng, hidden, tap, 3, 3, 1, 1, false),
            bn2: BatchNorm::new(tap),
            cls: Conv2d::new(rng, tap, classes, 1, 1, 1, 0, true),
            tap_channels: tap,
        }
    }

    /// Returns `(class_logits, tap)`; logits are `(n, classes, 1, 1)` and the
    /// tap keeps the spatial size of `x`.
    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<(Tensor, Tensor)> {
        let h = g.relu(&self.bn1.forward(g, &self.c1.forward(g, x)?, training)?)?;
        let tap = g.relu(&self.bn2.forward(g, &self.c2.forward(g, &h)?, training)?)?;
        let pooled = g.global_avg_pool(&tap)?;
        let logits = self.cls.forward(g, &pooled)?;
        Ok((logits, tap))
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        self.c1.collect(&format!("{prefix}.c1"), params);
        self.bn1.collect(&format!("{prefix}.bn1"), params);
        self.c2.collect(&format!("{prefix}.c2"), params);
        self.bn2.collect(&format!("{prefix}.bn2"), params);
        self.cls.collect(&format!("{prefix}.cls"), params);
    }
}

/// Semantic embedding branch: the low-level path times every upsampled
/// high-level path, elementwise. All 3×3 convs output `out_channels` so the
/// product is shape-valid; there is no nonlinearity between the convs and
/// the product, so each branch scales the output linearly.
pub struct SebBranch {
    low: Conv2d,
    highs: Vec<Conv2d>,
    pub out_channels: usize,
}

impl SebBranch {
    pub fn new(rng: &mut ChaCha8Rng, c_low: usize, c_highs: &[usize], out: usize) -> Self {
        SebBranch {
            low: Conv2d::new(rng, c_low, out, 3, 3, 1, 1, true),
            highs: c_highs
                .iter()
                .map(|&c| Conv2d::new(rng, c, out, 3, 3, 1, 1, true))
                .collect(),
            out_channels: out,
        }
    }

    pub fn forward(&self, g: &Graph, low: &Tensor, highs: &[&Tensor]) -> Result<Tensor> {
        if highs.len() != self.highs.len() {
            return Err(Error::arg(
                "seb_forward",
                format!("expected {} high-level inputs, got {}", self.highs.len(), highs.len()),
            ));
        }
        let ls = low.shape();
        let mut out = self.low.forward(g, low)?;
        for (conv, hx) in self.highs.iter().zip(highs) {
            let hs = hx.shape();
            if ls.h % hs.h != 0 || ls.w % hs.w != 0 {
                return Err(Error::shape(
                    "seb_forward",
                    format!("high level {} does not divide low level {}", hs, ls),
                ));
            }
            let (fy, fx) = (ls.h / hs.h, ls.w / hs.w);
            if fy != fx || !fy.is_power_of_two() {
                return Err(Error::shape(
                    "seb_forward",
                    format!("upsample ratio {fy}x{fx} is not a power-of-two factor"),
                ));
            }
            let mut h = conv.forward(g, hx)?;
            if fy > 1 {
                h = g.bilinear_upsample(&h, fy)?;
            }
            out = g.mul(&out, &h)?;
        }
        Ok(out)
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        self.low.collect(&format!("{prefix}.low"), params);
        for (i, c) in self.highs.iter().enumerate() {
            c.collect(&format!("{prefix}.high{i}"), params);
        }
    }
}

/// Upsampling flavor for the first decoder transition.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EcreVariant {
    /// Parameter-free sub-pixel shuffle plus an auxiliary segmentation loss.
    Ecre,
    /// Learned deconvolution plus the same auxiliary loss.
    DeconvSupervised,
    /// Sub-pixel shuffle alone, no auxiliary loss.
    ShuffleOnly,
}

/// First decoder upsampling step with optional auxiliary supervision. The
/// shuffle variants consume `r²` times the output channels; the deconv
/// variant is channel-preserving.
pub struct EcreModule {
    pub variant: EcreVariant,
    pub r: usize,
    deconv: Option<Deconv2d>,
    aux: Option<Conv2d>,
    out_channels: usize,
}

impl EcreModule {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        r: usize,
        classes: usize,
        variant: EcreVariant,
    ) -> Result<Self> {
        let out_channels = match variant {
            EcreVariant::Ecre | EcreVariant::ShuffleOnly => {
                if cin % (r * r) != 0 {
                    return Err(Error::arg(
                        "ecre_forward",
                        format!("{cin} channels not divisible by {}", r * r),
                    ));
                }
                cin / (r * r)
            }
            EcreVariant::DeconvSupervised => cin,
        };
        let deconv = matches!(variant, EcreVariant::DeconvSupervised)
            .then(|| Deconv2d::new(rng, cin, out_channels, r, r, 0));
        let aux = (!matches!(variant, EcreVariant::ShuffleOnly))
            .then(|| Conv2d::new(rng, out_channels, classes, 1, 1, 1, 0, true));
        Ok(EcreModule {
            variant,
            r,
            deconv,
            aux,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Returns the upsampled feature and, for the supervised variants, the
    /// auxiliary segmentation logits over it.
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let up = match &self.deconv {
            Some(d) => d.forward(g, x)?,
            None => g.sub_pixel_shuffle(x, self.r)?,
        };
        let aux = match &self.aux {
            Some(c) => Some(c.forward(g, &up)?),
            None => None,
        };
        Ok((up, aux))
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        if let Some(d) = &self.deconv {
            d.collect(&format!("{prefix}.deconv"), params);
        }
        if let Some(c) = &self.aux {
            c.collect(&format!("{prefix}.aux"), params);
        }
    }
}

/// Densely adjacent prediction. Channels split into `k²` groups of `classes`;
/// group `l·k+m` predicts the class scores of the position offset by
/// `(l−⌊k/2⌋, m−⌊k/2⌋)`, and each output pixel averages the scores aimed at
/// it. Out-of-bounds neighbors contribute zero and the divisor stays `k²`.
pub fn dap_forward(g: &Graph, x: &Tensor, k: usize, classes: usize) -> Result<Tensor> {
    let s = dap_check("dap_forward", x.shape(), k, classes)?;
    let out_shape = Shape::new(s.n, classes, s.h, s.w);
    let div = (k * k) as f64;
    let off = k / 2;
    let mut out = vec![0.0; out_shape.numel()];
    {
        let xd = x.data();
        for n in 0..s.n {
            for c in 0..classes {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let mut acc = 0.0;
                        for l in 0..k {
                            let y = (i + l).wrapping_sub(off);
                            for m in 0..k {
                                let xq = (j + m).wrapping_sub(off);
                                if y < s.h && xq < s.w {
                                    let ch = (l * k + m) * classes + c;
                                    acc += xd[s.at(n, ch, y, xq)];
                                }
                            }
                        }
                        out[out_shape.at(n, c, i, j)] = acc / div;
                    }
                }
            }
        }
    }
    let out = g.finish("dap_forward", out_shape, out, &[x])?;
    let xc = x.clone();
    g.record(&out, move |og| {
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..classes {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let v = og[out_shape.at(n, c, i, j)] / div;
                        for l in 0..k {
                            let y = (i + l).wrapping_sub(off);
                            for m in 0..k {
                                let xq = (j + m).wrapping_sub(off);
                                if y < s.h && xq < s.w {
                                    dx[s.at(n, (l * k + m) * classes + c, y, xq)] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        xc.accumulate_grad(&dx);
    });
    Ok(out)
}

/// Reference transcription of the adjacent-prediction average with the same
/// ascending `(l, m)` summation order as [`dap_forward`]; test oracle only.
pub fn dap_oracle(x: &Tensor, k: usize, classes: usize) -> Result<Tensor> {
    let s = dap_check("dap_oracle", x.shape(), k, classes)?;
    let out_shape = Shape::new(s.n, classes, s.h, s.w);
    let xd = x.data();
    let mut out = vec![0.0; out_shape.numel()];
    for n in 0..s.n {
        for c in 0..classes {
            for i in 0..s.h {
                for j in 0..s.w {
                    let mut acc = 0.0;
                    for l in 0..k {
                        for m in 0..k {
                            let iy = i as isize + l as isize - (k / 2) as isize;
                            let ix = j as isize + m as isize - (k / 2) as isize;
                            if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                                let group = l * k + m;
                                acc += xd[s.at(n, group * classes + c, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[out_shape.at(n, c, i, j)] = acc / (k * k) as f64;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Inverse of the sub-pixel shuffle: `(n, c, r·h, r·w)` back to
/// `(n, c·r², h, w)`. Graph-free; test and analysis helper.
pub fn unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r < 1 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::shape(
            "unshuffle",
            format!("{} is not divisible by factor {r}", s),
        ));
    }
    let out = crate::tensor::unshuffle_raw(s, &x.data(), r);
    Tensor::from_vec(Shape::new(s.n, s.c * r * r, s.h / r, s.w / r), out)
}

fn dap_check(op: &'static str, s: Shape, k: usize, classes: usize) -> Result<Shape> {
    if k % 2 == 0 {
        return Err(Error::arg(op, format!("window {k} must be odd")));
    }
    if s.c != classes * k * k {
        return Err(Error::shape(
            op,
            format!("{} channels, expected classes·k² = {}", s.c, classes * k * k),
        ));
    }
    Ok(s)
}
