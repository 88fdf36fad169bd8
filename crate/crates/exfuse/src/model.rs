//! Full segmentation model: encoder, per-level fusion paths, decoder chain
//! and prediction head.
//!
//! Fusion is residual: each decoder level adds a transform of the same-level
//! encoder feature onto the upsampled feature from the level above. With the
//! semantic embedding branch enabled the residual term for levels 1–3 is the
//! product branch instead of the GCN path; excluded levels contribute
//! nothing, leaving a pure upsampling pass-through.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{dap_forward, BoundaryRefine, EcreModule, EcreVariant, GcnBlock, SebBranch};
use crate::config::{ModelConfig, UpsampleKind};
use crate::encoder::{Encoder, EncoderOut};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Deconv2d, Params};
use crate::tensor::{flip_w_raw, Graph, Labels, Precision, Tensor, IGNORE_LABEL};

/// Large-kernel size of the per-level GCN blocks at this input scale.
pub const GCN_KERNEL: usize = 7;

/// Everything one forward pass produces: segmentation logits at input
/// resolution plus whatever auxiliary outputs the enabled toggles add.
pub struct ForwardOutputs {
    pub seg_logits: Tensor,
    pub ss_class_logits: Vec<Tensor>,
    pub ecre_aux_logits: Option<Tensor>,
}

enum Residual {
    GcnBr {
        gcn: GcnBlock,
        br: BoundaryRefine,
    },
    Seb {
        branch: SebBranch,
        high_levels: Vec<usize>,
    },
}

impl Residual {
    fn forward(&self, g: &Graph, feats: &[Tensor], level: usize) -> Result<Tensor> {
        match self {
            Residual::GcnBr { gcn, br } => br.forward(g, &gcn.forward(g, &feats[level - 1])?),
            Residual::Seb { branch, high_levels } => {
                let highs: Vec<&Tensor> = high_levels.iter().map(|&l| &feats[l - 1]).collect();
                branch.forward(g, &feats[level - 1], &highs)
            }
        }
    }

    fn collect(&self, prefix: &str, params: &mut Params) {
        match self {
            Residual::GcnBr { gcn, br } => {
                gcn.collect(&format!("{prefix}.gcn"), params);
                br.collect(&format!("{prefix}.br"), params);
            }
            Residual::Seb { branch, .. } => branch.collect(&format!("{prefix}.seb"), params),
        }
    }
}

enum Up {
    Identity,
    Deconv(Deconv2d),
    Bilinear(usize),
}

impl Up {
    fn apply(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        match self {
            Up::Identity => Ok(x.clone()),
            Up::Deconv(d) => d.forward(g, x),
            Up::Bilinear(f) => g.bilinear_upsample(x, *f),
        }
    }

    fn collect(&self, prefix: &str, params: &mut Params) {
        if let Up::Deconv(d) = self {
            d.collect(prefix, params);
        }
    }
}

/// Spatial sizes of the four encoder stages for a given input size.
fn stage_sizes(input: usize) -> Result<[usize; 4]> {
    if input < 8 {
        return Err(Error::Config(format!("input_size {input} is below the minimum of 8")));
    }
    let stem = (input - 1) / 2 + 1;
    if stem % 2 != 0 {
        return Err(Error::Config(format!(
            "input_size {input} does not survive the stem max-reduce"
        )));
    }
    let down = |h: usize| (h - 1) / 2 + 1;
    let s1 = stem / 2;
    let s2 = down(s1);
    let s3 = down(s2);
    let s4 = down(s3);
    Ok([s1, s2, s3, s4])
}

fn ratio(hi: usize, lo: usize) -> Result<usize> {
    if hi % lo != 0 || !matches!(hi / lo, 1 | 2) {
        return Err(Error::Config(format!(
            "stage sizes {hi}/{lo} do not form a 1x or 2x decoder transition"
        )));
    }
    Ok(hi / lo)
}

pub struct Model {
    pub cfg: ModelConfig,
    encoder: Encoder,
    level4: Residual,
    /// residual paths for levels 3, 2, 1 (in that decode order)
    residuals: [Option<Residual>; 3],
    ecre: Option<EcreModule>,
    /// transitions level4→3, 3→2, 2→1, then the two final upsamplings
    ups: [Up; 5],
    head: Conv2d,
    params: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sizes = stage_sizes(cfg.input_size)?;
        let r1 = ratio(sizes[2], sizes[3])?;
        let r2 = ratio(sizes[1], sizes[2])?;
        let r3 = ratio(sizes[0], sizes[1])?;
        if cfg.input_size / sizes[0] != 4 {
            return Err(Error::Config(format!(
                "level-1 stride {} is not 4",
                cfg.input_size / sizes[0]
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = cfg.effective_plan();
        let mut encoder = Encoder::new(&mut rng, plan);
        if cfg.ss {
            encoder.attach_semantic_supervision(&mut rng, cfg.classes);
        }

        let d = cfg.decoder_width;
        let level4_out = if cfg.ecre && cfg.ecre_variant != EcreVariant::DeconvSupervised {
            d * r1 * r1
        } else {
            d
        };
        let c4 = encoder.feat_channels(3, cfg.ss);
        let level4 = Residual::GcnBr {
            gcn: GcnBlock::new(&mut rng, c4, level4_out, GCN_KERNEL)?,
            br: BoundaryRefine::new(&mut rng, level4_out),
        };
        let ecre = if cfg.ecre {
            Some(EcreModule::new(&mut rng, level4_out, r1, cfg.classes, cfg.ecre_variant)?)
        } else {
            None
        };

        let mut residuals: [Option<Residual>; 3] = [None, None, None];
        for (slot, level) in [(0usize, 3usize), (1, 2), (2, 1)] {
            if !cfg.levels.contains(&(level as u8)) {
                continue;
            }
            let c_low = encoder.feat_channels(level - 1, cfg.ss);
            residuals[slot] = Some(if cfg.seb {
                let high_levels: Vec<usize> = (level + 1..=4)
                    .filter(|&l| cfg.levels.contains(&(l as u8)))
                    .collect();
                let high_chs: Vec<usize> = high_levels
                    .iter()
                    .map(|&l| encoder.feat_channels(l - 1, cfg.ss))
                    .collect();
                Residual::Seb {
                    branch: SebBranch::new(&mut rng, c_low, &high_chs, d),
                    high_levels,
                }
            } else {
                Residual::GcnBr {
                    gcn: GcnBlock::new(&mut rng, c_low, d, GCN_KERNEL)?,
                    br: BoundaryRefine::new(&mut rng, d),
                }
            });
        }

        let make_up = |rng: &mut ChaCha8Rng, factor: usize| -> Up {
            if factor == 1 {
                Up::Identity
            } else {
                match cfg.upsample {
                    UpsampleKind::Deconv => Up::Deconv(Deconv2d::new(rng, d, d, factor, factor, 0)),
                    UpsampleKind::Bilinear => Up::Bilinear(factor),
                }
            }
        };
        let ups = [
            if cfg.ecre { Up::Identity } else { make_up(&mut rng, r1) },
            make_up(&mut rng, r2),
            make_up(&mut rng, r3),
            make_up(&mut rng, 2),
            make_up(&mut rng, 2),
        ];

        let head_out = if cfg.dap {
            cfg.classes * cfg.dap_k * cfg.dap_k
        } else {
            cfg.classes
        };
        let head = Conv2d::new(&mut rng, d, head_out, 1, 1, 1, 0, true);

        let mut model = Model {
            cfg,
            encoder,
            level4,
            residuals,
            ecre,
            ups,
            head,
            params: Params::default(),
        };
        let mut params = Params::default();
        model.encoder.collect("encoder", &mut params);
        model.level4.collect("decoder.level4", &mut params);
        if let Some(e) = &model.ecre {
            e.collect("decoder.ecre", &mut params);
        }
        for (slot, level) in [(0usize, 3usize), (1, 2), (2, 1)] {
            if let Some(r) = &model.residuals[slot] {
                r.collect(&format!("decoder.level{level}"), &mut params);
            }
        }
        for (i, up) in model.ups.iter().enumerate() {
            up.collect(&format!("decoder.up{}", i + 1), &mut params);
        }
        model.head.collect("head", &mut params);
        model.params = params;
        Ok(model)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn encode(&self, g: &Graph, images: &Tensor, training: bool) -> Result<EncoderOut> {
        self.encoder.forward(g, images, training, self.cfg.ss)
    }

    /// Decode the four encoder features into segmentation logits. Only levels
    /// present in the config contribute; the rest of the chain is pure
    /// upsampling.
    pub fn decode(&self, g: &Graph, enc: &EncoderOut, _training: bool) -> Result<ForwardOutputs> {
        let feats = &enc.feats;
        let f4 = self.level4.forward(g, feats, 4)?;
        let mut ecre_aux = None;
        let mut y = match &self.ecre {
            Some(m) => {
                let (up, aux) = m.forward(g, &f4)?;
                ecre_aux = aux;
                up
            }
            None => self.ups[0].apply(g, &f4)?,
        };
        for (slot, level) in [(0usize, 3usize), (1, 2), (2, 1)] {
            if let Some(res) = &self.residuals[slot] {
                let r = res.forward(g, feats, level)?;
                y = g.add(&y, &r)?;
            }
            let next_up = slot + 1;
            y = self.ups[next_up].apply(g, &y)?;
        }
        y = self.ups[4].apply(g, &y)?;
        let mut seg_logits = self.head.forward(g, &y)?;
        if self.cfg.dap {
            seg_logits = dap_forward(g, &seg_logits, self.cfg.dap_k, self.cfg.classes)?;
        }
        Ok(ForwardOutputs {
            seg_logits,
            ss_class_logits: enc.ss_logits.clone().unwrap_or_default(),
            ecre_aux_logits: ecre_aux,
        })
    }

    pub fn forward(&self, g: &Graph, images: &Tensor, training: bool) -> Result<ForwardOutputs> {
        let enc = self.encode(g, images, training)?;
        self.decode(g, &enc, training)
    }

    /// Main segmentation loss plus the weighted auxiliary terms of whatever
    /// toggles are enabled.
    pub fn total_loss(&self, g: &Graph, outputs: &ForwardOutputs, labels: &Labels) -> Result<Tensor> {
        let mut total = g.softmax_cross_entropy(&outputs.seg_logits, labels, IGNORE_LABEL)?;
        if self.cfg.ss {
            if outputs.ss_class_logits.len() != 4 {
                return Err(Error::arg(
                    "total_loss",
                    "semantic supervision enabled but class logits are missing",
                ));
            }
            let targets = presence_targets(labels, self.cfg.classes);
            let mut aux: Option<Tensor> = None;
            for logits in &outputs.ss_class_logits {
                let term = g.sigmoid_bce(logits, &targets)?;
                aux = Some(match aux {
                    Some(acc) => g.add(&acc, &term)?,
                    None => term,
                });
            }
            total = g.add(&total, &g.scale(&aux.expect("four heads"), self.cfg.ss_w)?)?;
        }
        if self.cfg.ecre && self.cfg.ecre_variant != EcreVariant::ShuffleOnly {
            let aux = outputs.ecre_aux_logits.as_ref().ok_or_else(|| {
                Error::arg("total_loss", "ecre enabled but auxiliary logits are missing")
            })?;
            let s = aux.shape();
            let ds = downsample_labels(labels, labels.h / s.h);
            let term = g.softmax_cross_entropy(aux, &ds, IGNORE_LABEL)?;
            total = g.add(&total, &g.scale(&term, self.cfg.ecre_w)?)?;
        }
        Ok(total)
    }

    /// Argmax class map, optionally averaging the score map with the score
    /// map of the horizontally flipped input. Ties break to the lowest class.
    pub fn predict(&self, images: &Tensor, flip_average: bool, precision: Precision) -> Result<Labels> {
        let g = Graph::no_grad(precision);
        let out = self.forward(&g, images, false)?;
        let s = out.seg_logits.shape();
        let mut scores = out.seg_logits.to_vec();
        if flip_average {
            let g2 = Graph::no_grad(precision);
            let flipped = g2.flip_w(images)?;
            let out2 = self.forward(&g2, &flipped, false)?;
            let unflipped = flip_w_raw(s, &out2.seg_logits.data());
            for (a, b) in scores.iter_mut().zip(unflipped) {
                *a = 0.5 * (*a + b);
            }
        }
        let hw = s.h * s.w;
        let mut labels = vec![0u8; s.n * hw];
        for n in 0..s.n {
            for p in 0..hw {
                let mut best_c = 0usize;
                let mut best = scores[(n * s.c) * hw + p];
                for c in 1..s.c {
                    let v = scores[(n * s.c + c) * hw + p];
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                labels[n * hw + p] = best_c as u8;
            }
        }
        Labels::new(s.n, s.h, s.w, labels)
    }

    /// Attached semantic supervision heads, if any (test access).
    #[cfg(test)]
    pub(crate) fn parts(&self) -> (&Residual, &[Option<Residual>; 3], &Option<EcreModule>, &[Up; 5], &Conv2d) {
        (&self.level4, &self.residuals, &self.ecre, &self.ups, &self.head)
    }
}

/// Multi-label presence targets per image: class c is present when any
/// non-ignored pixel carries it.
pub fn presence_targets(labels: &Labels, classes: usize) -> Vec<f64> {
    let hw = labels.h * labels.w;
    let mut t = vec![0.0; labels.n * classes];
    for n in 0..labels.n {
        for p in 0..hw {
            let l = labels.data[n * hw + p];
            if l != IGNORE_LABEL {
                t[n * classes + l as usize] = 1.0;
            }
        }
    }
    t
}

/// Nearest-center downsampling of a label map by an integer factor.
pub fn downsample_labels(labels: &Labels, factor: usize) -> Labels {
    if factor <= 1 {
        return labels.clone();
    }
    let (oh, ow) = (labels.h / factor, labels.w / factor);
    let mut data = vec![0u8; labels.n * oh * ow];
    for n in 0..labels.n {
        for i in 0..oh {
            for j in 0..ow {
                data[(n * oh + i) * ow + j] =
                    labels.at(n, i * factor + factor / 2, j * factor + factor / 2);
            }
        }
    }
    Labels::new(labels.n, oh, ow, data).expect("sizes divide")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::StagePlan;
    use crate::tensor::Shape;
    use rand::prelude::*;
    use std::collections::BTreeSet;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            classes: 3,
            input_size: 32,
            plan: StagePlan::new([1, 1, 1, 1], [4, 6, 8, 8], 4).unwrap(),
            decoder_width: 8,
            ..Default::default()
        }
    }

    fn rand_images(seed: u64, n: usize, size: usize) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(n, 3, size, size);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn rand_labels(seed: u64, n: usize, size: usize, classes: usize) -> Labels {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Labels::new(
            n,
            size,
            size,
            (0..n * size * size)
                .map(|_| {
                    let v = r.random_range(0..classes + 1);
                    if v == classes { IGNORE_LABEL } else { v as u8 }
                })
                .collect(),
        )
        .unwrap()
    }

    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_shape_contract_and_no_aux_when_off() {
        let cfg = ModelConfig { classes: 5, input_size: 64, ..tiny_cfg() };
        let model = Model::new(cfg, 7).unwrap();
        let g = Graph::new(Precision::Single);
        let images = rand_images(1, 2, 64);
        let out = model.forward(&g, &images, true).unwrap();
        assert_eq!(out.seg_logits.shape(), Shape::new(2, 5, 64, 64));
        assert!(out.ss_class_logits.is_empty());
        assert!(out.ecre_aux_logits.is_none());
    }

    #[test]
    fn full_variant_emits_every_aux_output() {
        let cfg = ModelConfig {
            ss: true,
            lr: true,
            ecre: true,
            seb: true,
            dap: true,
            ..tiny_cfg()
        };
        let model = Model::new(cfg, 7).unwrap();
        let g = Graph::new(Precision::Single);
        let images = rand_images(2, 1, 32);
        let out = model.forward(&g, &images, true).unwrap();
        assert_eq!(out.seg_logits.shape(), Shape::new(1, 3, 32, 32));
        assert_eq!(out.ss_class_logits.len(), 4);
        let aux = out.ecre_aux_logits.unwrap();
        // first transition doubles the 1x1 level-4 feature to the level-3 size
        assert_eq!(aux.shape(), Shape::new(1, 3, 2, 2));
        // decoder output feeding the adjacent-prediction head is classes*k^2
        let (.., head) = model.parts();
        assert_eq!(head.w.shape().n, 3 * 9);
    }

    #[test]
    fn excluded_levels_cannot_influence_logits() {
        let mut cfg = tiny_cfg();
        cfg.levels = BTreeSet::from([2, 4]);
        cfg.seb = true;
        let model = Model::new(cfg, 3).unwrap();
        let g = Graph::no_grad(Precision::Double);
        let images = rand_images(5, 1, 32);
        let enc = model.encode(&g, &images, false).unwrap();
        let base = model.decode(&g, &enc, false).unwrap().seg_logits.to_vec();

        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut perturbed = enc;
        for level in [1usize, 3] {
            let f = &perturbed.feats[level - 1];
            let noise: Vec<f64> = (0..f.numel()).map(|_| r.random::<f64>() * 10.0 - 5.0).collect();
            perturbed.feats[level - 1] = Tensor::from_vec(f.shape(), noise).unwrap();
        }
        let again = model.decode(&g, &perturbed, false).unwrap().seg_logits.to_vec();
        assert_eq!(base, again);
    }

    #[test]
    fn zeroed_residuals_reduce_to_the_pure_upsampling_chain() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg, 9).unwrap();
        // zero every residual-path parameter on levels 1..3
        for (name, t) in &model.params().trainable {
            if name.starts_with("decoder.level1")
                || name.starts_with("decoder.level2")
                || name.starts_with("decoder.level3")
            {
                t.set_data(&vec![0.0; t.numel()]).unwrap();
            }
        }
        let g = Graph::no_grad(Precision::Double);
        let images = rand_images(6, 1, 32);
        let enc = model.encode(&g, &images, false).unwrap();
        let out = model.decode(&g, &enc, false).unwrap();

        let (level4, _, _, ups, head) = model.parts();
        let f4 = level4.forward(&g, &enc.feats, 4).unwrap();
        let mut y = f4;
        for up in ups {
            y = up.apply(&g, &y).unwrap();
        }
        let want = head.forward(&g, &y).unwrap();
        assert_eq!(out.seg_logits.to_vec(), want.to_vec());
    }

    #[test]
    fn seb_toggle_changes_values_but_not_shapes() {
        let mut cfg = tiny_cfg();
        let base = Model::new(cfg.clone(), 5).unwrap();
        cfg.seb = true;
        let seb = Model::new(cfg, 5).unwrap();
        let g = Graph::new(Precision::Single);
        let images = rand_images(8, 1, 32);
        let a = base.forward(&g, &images, true).unwrap();
        let b = seb.forward(&g, &images, true).unwrap();
        assert_eq!(a.seg_logits.shape(), b.seg_logits.shape());
        assert_ne!(a.seg_logits.to_vec(), b.seg_logits.to_vec());
    }

    #[test]
    fn loss_reduces_to_main_term_when_nothing_is_enabled() {
        let model = Model::new(tiny_cfg(), 2).unwrap();
        let g = Graph::new(Precision::Double);
        let images = rand_images(3, 2, 32);
        let labels = rand_labels(4, 2, 32, 3);
        let out = model.forward(&g, &images, true).unwrap();
        let total = model.total_loss(&g, &out, &labels).unwrap();
        let main = g
            .softmax_cross_entropy(&out.seg_logits, &labels, IGNORE_LABEL)
            .unwrap();
        assert_eq!(total.item(), main.item());
    }

    #[test]
    fn zero_aux_weights_recover_the_main_loss() {
        let mut cfg = tiny_cfg();
        cfg.ss = true;
        cfg.ecre = true;
        cfg.ss_w = 0.0;
        cfg.ecre_w = 0.0;
        let model = Model::new(cfg, 2).unwrap();
        let g = Graph::new(Precision::Double);
        let images = rand_images(3, 1, 32);
        let labels = rand_labels(4, 1, 32, 3);
        let out = model.forward(&g, &images, true).unwrap();
        let total = model.total_loss(&g, &out, &labels).unwrap();
        let main = g
            .softmax_cross_entropy(&out.seg_logits, &labels, IGNORE_LABEL)
            .unwrap();
        assert_eq!(total.item(), main.item());
    }

    #[test]
    fn enabled_losses_match_hand_summed_terms() {
        let mut cfg = tiny_cfg();
        cfg.ss = true;
        cfg.ecre = true;
        let model = Model::new(cfg.clone(), 2).unwrap();
        let g = Graph::new(Precision::Double);
        let images = rand_images(3, 2, 32);
        let labels = rand_labels(4, 2, 32, 3);
        let out = model.forward(&g, &images, true).unwrap();
        let total = model.total_loss(&g, &out, &labels).unwrap();

        let main = g
            .softmax_cross_entropy(&out.seg_logits, &labels, IGNORE_LABEL)
            .unwrap()
            .item();
        let targets = presence_targets(&labels, 3);
        let mut ss_sum = 0.0;
        for l in &out.ss_class_logits {
            ss_sum += g.sigmoid_bce(l, &targets).unwrap().item();
        }
        let aux = out.ecre_aux_logits.as_ref().unwrap();
        let ds = downsample_labels(&labels, 32 / aux.shape().h);
        let ecre = g.softmax_cross_entropy(aux, &ds, IGNORE_LABEL).unwrap().item();
        let want = main + cfg.ss_w * ss_sum + cfg.ecre_w * ecre;
        assert!((total.item() - want).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_valid_classes_and_flip_average_matches_oracle() {
        let model = Model::new(tiny_cfg(), 13).unwrap();
        let images = rand_images(9, 2, 32);
        let pred = model.predict(&images, false, Precision::Double).unwrap();
        assert!(pred.data.iter().all(|&v| v < 3));

        // flip averaging equals the hand-computed two-forward average
        let g = Graph::no_grad(Precision::Double);
        let a = model.forward(&g, &images, false).unwrap().seg_logits;
        let flipped = g.flip_w(&images).unwrap();
        let b = model.forward(&g, &flipped, false).unwrap().seg_logits;
        let bu = flip_w_raw(b.shape(), &b.data());
        let s = a.shape();
        let hw = s.h * s.w;
        let avg: Vec<f64> = a.to_vec().iter().zip(bu).map(|(x, y)| 0.5 * (x + y)).collect();
        let pred_flip = model.predict(&images, true, Precision::Double).unwrap();
        for n in 0..s.n {
            for p in 0..hw {
                let mut best_c = 0;
                let mut best = avg[(n * s.c) * hw + p];
                for c in 1..s.c {
                    let v = avg[(n * s.c + c) * hw + p];
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                assert_eq!(pred_flip.data[n * hw + p], best_c as u8);
            }
        }
    }

    #[test]
    fn flip_averaged_prediction_commutes_with_input_flips() {
        // flipping the input flips the flip-averaged prediction, nothing else
        let model = Model::new(tiny_cfg(), 17).unwrap();
        let images = rand_images(31, 2, 32);
        let g = Graph::no_grad(Precision::Double);
        let flipped = g.flip_w(&images).unwrap();
        let a = model.predict(&images, true, Precision::Double).unwrap();
        let b = model.predict(&flipped, true, Precision::Double).unwrap();
        let hw = 32 * 32;
        for n in 0..2 {
            for i in 0..32 {
                for j in 0..32 {
                    assert_eq!(
                        a.data[n * hw + i * 32 + j],
                        b.data[n * hw + i * 32 + (31 - j)]
                    );
                }
            }
        }
    }

    #[test]
    fn single_and_double_forward_agree_within_tolerance() {
        let model = Model::new(tiny_cfg(), 23).unwrap();
        let images = rand_images(10, 1, 32);
        let gs = Graph::no_grad(Precision::Single);
        let gd = Graph::no_grad(Precision::Double);
        let a = model.forward(&gs, &images, false).unwrap().seg_logits;
        let b = model.forward(&gd, &images, false).unwrap().seg_logits;
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn tiny_input_collapses_transitions_to_identity() {
        // 8x8 inputs give stage sizes {2,1,1,1}; the first two transitions
        // become identities and the model still reaches full resolution.
        let mut cfg = tiny_cfg();
        cfg.input_size = 8;
        cfg.classes = 2;
        let model = Model::new(cfg, 29).unwrap();
        let g = Graph::new(Precision::Double);
        let images = rand_images(11, 1, 8);
        let out = model.forward(&g, &images, true).unwrap();
        assert_eq!(out.seg_logits.shape(), Shape::new(1, 2, 8, 8));
    }

    #[test]
    fn presence_targets_flag_observed_classes() {
        let labels = Labels::new(1, 2, 2, vec![0, 2, IGNORE_LABEL, 2]).unwrap();
        assert_eq!(presence_targets(&labels, 4), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn label_downsampling_picks_cell_centers() {
        let labels = Labels::new(1, 4, 4, (0..16).map(|v| v as u8).collect()).unwrap();
        let ds = downsample_labels(&labels, 2);
        assert_eq!(ds.data, vec![5, 7, 13, 15]);
    }
}
