//! Flat `key = value` config files for model variants and training runs.
//! Unknown keys are rejected; emit/parse round-trips exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::blocks::EcreVariant;
use crate::encoder::StagePlan;
use crate::error::{Error, Result};

/// Decoder upsampling operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UpsampleKind {
    Deconv,
    Bilinear,
}

/// Declarative description of one model variant: mechanism toggles, stage
/// plan, widths, class count and adjacent-prediction window.
#[derive(Clone, PartialEq, Debug)]
pub struct ModelConfig {
    pub classes: usize,
    pub input_size: usize,
    pub plan: StagePlan,
    pub ss: bool,
    pub lr: bool,
    pub ecre: bool,
    pub ecre_variant: EcreVariant,
    pub seb: bool,
    pub dap: bool,
    pub dap_k: usize,
    pub levels: BTreeSet<u8>,
    pub upsample: UpsampleKind,
    pub ss_w: f64,
    pub ecre_w: f64,
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 5,
            input_size: 64,
            plan: StagePlan::baseline(),
            ss: false,
            lr: false,
            ecre: false,
            ecre_variant: EcreVariant::Ecre,
            seb: false,
            dap: false,
            dap_k: 3,
            levels: BTreeSet::from([1, 2, 3, 4]),
            upsample: UpsampleKind::Deconv,
            ss_w: 0.4,
            ecre_w: 0.4,
            decoder_width: 16,
        }
    }
}

impl ModelConfig {
    /// The toggled-on variant with every mechanism enabled.
    pub fn full() -> Self {
        ModelConfig {
            ss: true,
            lr: true,
            ecre: true,
            seb: true,
            dap: true,
            ..Default::default()
        }
    }

    /// The stage plan actually built: the layer-rearrangement toggle swaps in
    /// the depth-shifted plan at matched capacity.
    pub fn effective_plan(&self) -> StagePlan {
        if self.lr {
            self.plan.rearranged()
        } else {
            self.plan
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.dap_k % 2 == 0 {
            return Err(Error::Config(format!("dap_k {} must be odd", self.dap_k)));
        }
        if !self.levels.contains(&4) {
            return Err(Error::Config("level 4 is mandatory".into()));
        }
        if self.levels.iter().any(|&l| l == 0 || l > 4) {
            return Err(Error::Config("levels must be within 1..=4".into()));
        }
        if self.ss_w < 0.0 || self.ecre_w < 0.0 {
            return Err(Error::Config("aux weights must be nonnegative".into()));
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder_width must be positive".into()));
        }
        Ok(())
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "blocks = {}", join(&self.plan.blocks));
        let _ = writeln!(s, "widths = {}", join(&self.plan.widths));
        let _ = writeln!(s, "stem_width = {}", self.plan.stem_width);
        let _ = writeln!(s, "ss = {}", self.ss);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "ecre = {}", self.ecre);
        let _ = writeln!(s, "ecre_variant = {}", variant_name(self.ecre_variant));
        let _ = writeln!(s, "seb = {}", self.seb);
        let _ = writeln!(s, "dap = {}", self.dap);
        let _ = writeln!(s, "dap_k = {}", self.dap_k);
        let levels: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(s, "levels = {}", levels.join(","));
        let _ = writeln!(
            s,
            "upsample = {}",
            match self.upsample {
                UpsampleKind::Deconv => "deconv",
                UpsampleKind::Bilinear => "bilinear",
            }
        );
        let _ = writeln!(s, "ss_w = {}", self.ss_w);
        let _ = writeln!(s, "ecre_w = {}", self.ecre_w);
        let _ = writeln!(s, "decoder_width = {}", self.decoder_width);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in kv_lines(text)? {
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its config-file key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.classes = int(key, value)?,
            "input_size" => self.input_size = int(key, value)?,
            "blocks" => self.plan.blocks = quad(key, value)?,
            "widths" => self.plan.widths = quad(key, value)?,
            "stem_width" => self.plan.stem_width = int(key, value)?,
            "ss" => self.ss = boolean(key, value)?,
            "lr" => self.lr = boolean(key, value)?,
            "ecre" => self.ecre = boolean(key, value)?,
            "ecre_variant" => {
                self.ecre_variant = match value {
                    "ecre" => EcreVariant::Ecre,
                    "deconv_supervised" => EcreVariant::DeconvSupervised,
                    "shuffle_only" => EcreVariant::ShuffleOnly,
                    other => {
                        return Err(Error::Config(format!("unknown ecre_variant `{other}`")))
                    }
                }
            }
            "seb" => self.seb = boolean(key, value)?,
            "dap" => self.dap = boolean(key, value)?,
            "dap_k" => self.dap_k = int(key, value)?,
            "levels" => {
                let mut set = BTreeSet::new();
                for part in value.split(',') {
                    set.insert(
                        part.trim()
                            .parse::<u8>()
                            .map_err(|_| Error::Config(format!("bad level `{part}`")))?,
                    );
                }
                self.levels = set;
            }
            "upsample" => {
                self.upsample = match value {
                    "deconv" => UpsampleKind::Deconv,
                    "bilinear" => UpsampleKind::Bilinear,
                    other => return Err(Error::Config(format!("unknown upsample `{other}`"))),
                }
            }
            "ss_w" => self.ss_w = real(key, value)?,
            "ecre_w" => self.ecre_w = real(key, value)?,
            "decoder_width" => self.decoder_width = int(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

fn variant_name(v: EcreVariant) -> &'static str {
    match v {
        EcreVariant::Ecre => "ecre",
        EcreVariant::DeconvSupervised => "deconv_supervised",
        EcreVariant::ShuffleOnly => "shuffle_only",
    }
}

/// Optimization schedule and reproducibility knobs for one training run.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            seed: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::Config("poly_power must be positive".into()));
        }
        Ok(())
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "poly_power = {}", self.poly_power);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in kv_lines(text)? {
            match key.as_str() {
                "epochs" => cfg.epochs = int(&key, &value)?,
                "batch_size" => cfg.batch_size = int(&key, &value)?,
                "base_lr" => cfg.base_lr = real(&key, &value)?,
                "momentum" => cfg.momentum = real(&key, &value)?,
                "weight_decay" => cfg.weight_decay = real(&key, &value)?,
                "poly_power" => cfg.poly_power = real(&key, &value)?,
                "seed" => cfg.seed = int(&key, &value)? as u64,
                "eval_every" => cfg.eval_every = int(&key, &value)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Split a config file into trimmed `key = value` pairs; `#` starts a comment.
pub fn kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: missing `=` in `{raw}`", no + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn int(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad integer for `{key}`: `{v}`")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad number for `{key}`: `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for `{key}`: `{v}`"))),
    }
}

fn join(xs: &[usize; 4]) -> String {
    xs.map(|x| x.to_string()).join(",")
}

fn quad(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| int(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly 4 values")))
}
