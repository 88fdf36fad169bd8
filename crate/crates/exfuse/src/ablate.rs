//! Ablation harness: train and evaluate a grid of model variants over
//! multiple seeds, and emit the comparison as an aligned text table plus a
//! machine-readable CSV whose rows are independently reproducible.

use std::fmt::Write as _;

use crate::blocks::EcreVariant;
use crate::config::{kv_lines, ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{evaluate, train};

/// One named model variant of the grid: overrides applied to a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub rows: Vec<GridRow>,
}

impl AblationGrid {
    /// Parse a grid file: `base.<key> = value` lines adjust the base config,
    /// `row.<name> = k=v; k=v; ...` lines add variants (file order kept).
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = ModelConfig::default();
        let mut pending: Vec<(String, String)> = Vec::new();
        for (key, value) in kv_lines(text)? {
            if let Some(k) = key.strip_prefix("base.") {
                base.apply(k, &value)?;
            } else if let Some(name) = key.strip_prefix("row.") {
                pending.push((name.to_string(), value));
            } else {
                return Err(Error::Config(format!(
                    "grid keys must start with `base.` or `row.`, got `{key}`"
                )));
            }
        }
        if pending.is_empty() {
            return Err(Error::Config("grid defines no rows".into()));
        }
        let mut rows = Vec::with_capacity(pending.len());
        for (name, overrides) in pending {
            let mut cfg = base.clone();
            for clause in overrides.split(';') {
                let clause = clause.trim();
                if clause.is_empty() {
                    continue;
                }
                let Some((k, v)) = clause.split_once('=') else {
                    return Err(Error::Config(format!("row `{name}`: bad override `{clause}`")));
                };
                cfg.apply(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            rows.push(GridRow { name, config: cfg });
        }
        Ok(AblationGrid { rows })
    }

    /// Mechanism-toggle ablation: from the plain baseline to fully equipped.
    pub fn mechanism_grid(base: &ModelConfig) -> Self {
        let specs: [(&str, &[&str]); 7] = [
            ("baseline", &[]),
            ("ss", &["ss"]),
            ("ss_lr", &["ss", "lr"]),
            ("ss_lr_ecre", &["ss", "lr", "ecre"]),
            ("ss_lr_seb", &["ss", "lr", "seb"]),
            ("ss_lr_seb_dap", &["ss", "lr", "seb", "dap"]),
            ("all", &["ss", "lr", "ecre", "seb", "dap"]),
        ];
        let rows = specs
            .iter()
            .map(|(name, toggles)| {
                let mut cfg = base.clone();
                for t in *toggles {
                    cfg.apply(t, "true").expect("known toggle");
                }
                GridRow {
                    name: name.to_string(),
                    config: cfg,
                }
            })
            .collect();
        AblationGrid { rows }
    }

    /// Upsampling-variant ablation over the first decoder transition.
    pub fn ecre_variant_grid(base: &ModelConfig) -> Self {
        let mut on = base.clone();
        on.ss = true;
        on.lr = true;
        let mut rows = vec![GridRow {
            name: "baseline".into(),
            config: on.clone(),
        }];
        for (name, variant) in [
            ("deconv_supervised", EcreVariant::DeconvSupervised),
            ("shuffle_only", EcreVariant::ShuffleOnly),
            ("ecre", EcreVariant::Ecre),
        ] {
            let mut cfg = on.clone();
            cfg.ecre = true;
            cfg.ecre_variant = variant;
            rows.push(GridRow {
                name: name.into(),
                config: cfg,
            });
        }
        AblationGrid { rows }
    }

    /// Feature-level subsets {4}, {3,4}, {2,3,4}, {1,2,3,4} for the baseline
    /// and the fully equipped variant.
    pub fn level_grid(base: &ModelConfig) -> Self {
        let mut rows = Vec::new();
        for (prefix, full) in [("baseline", false), ("exfuse", true)] {
            for levels in ["4", "3,4", "2,3,4", "1,2,3,4"] {
                let mut cfg = base.clone();
                if full {
                    for t in ["ss", "lr", "ecre", "seb", "dap"] {
                        cfg.apply(t, "true").expect("known toggle");
                    }
                }
                cfg.apply("levels", levels).expect("levels");
                rows.push(GridRow {
                    name: format!("{prefix}_{}", levels.replace(',', "")),
                    config: cfg,
                });
            }
        }
        AblationGrid { rows }
    }
}

/// Result of one (variant, seed) training run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub miou: f64,
    pub per_class: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Train and evaluate every grid row with every seed. A diverged run is
/// recorded on its row and does not abort the rest of the grid.
pub fn ablate(
    grid: &AblationGrid,
    tc: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let mut rows = Vec::with_capacity(grid.rows.len() * seeds.len());
    for row in &grid.rows {
        for &seed in seeds {
            let run_tc = TrainConfig { seed, ..*tc };
            log::info!("ablate: {} seed {seed}", row.name);
            let outcome = train(&row.config, &run_tc, train_ds, None)
                .and_then(|(model, _)| evaluate(&model, eval_ds, false));
            let (miou, per_class, error) = match outcome {
                Ok((m, pc)) => (m, pc, None),
                Err(e) => {
                    log::warn!("ablate: {} seed {seed} failed: {e}", row.name);
                    (f64::NAN, vec![f64::NAN; row.config.classes], Some(e.to_string()))
                }
            };
            rows.push(AblationRow {
                name: row.name.clone(),
                config: row.config.clone(),
                seed,
                miou,
                per_class,
                error,
            });
        }
    }
    Ok(AblationReport { rows })
}

/// Median over defined (non-NaN) values; NaN when none are defined.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblationReport {
    /// Per-variant summary in first-appearance order:
    /// `(name, per-seed mious, median, mean)`.
    pub fn summaries(&self) -> Vec<(String, Vec<f64>, f64, f64)> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.name) {
                names.push(r.name.clone());
            }
        }
        names
            .into_iter()
            .map(|name| {
                let mious: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.name == name)
                    .map(|r| r.miou)
                    .collect();
                let med = median(&mious);
                let mn = mean(&mious);
                (name, mious, med, mn)
            })
            .collect()
    }

    pub fn median_for(&self, name: &str) -> f64 {
        let mious: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.name == name)
            .map(|r| r.miou)
            .collect();
        median(&mious)
    }

    /// Aligned text table with mechanism-toggle columns, per-seed mIoU,
    /// medians and means, and the paper-scale reference rows as a footer.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>2} {:>2} {:>4} {:>3} {:>3}  {:<8} {:<24} {:>7} {:>7}",
            "variant", "SS", "LR", "ECRE", "SEB", "DAP", "levels", "per-seed mIoU", "median", "mean"
        );
        let _ = writeln!(out, "{}", "-".repeat(92));
        for (name, mious, med, mn) in self.summaries() {
            let cfg = &self
                .rows
                .iter()
                .find(|r| r.name == name)
                .expect("summary name comes from rows")
                .config;
            let mark = |b: bool| if b { "x" } else { "." };
            let ecre = if !cfg.ecre {
                "."
            } else {
                match cfg.ecre_variant {
                    EcreVariant::Ecre => "x",
                    EcreVariant::DeconvSupervised => "d",
                    EcreVariant::ShuffleOnly => "s",
                }
            };
            let levels: Vec<String> = cfg.levels.iter().map(|l| l.to_string()).collect();
            let per_seed: Vec<String> = mious.iter().map(|m| format!("{m:.4}")).collect();
            let _ = writeln!(
                out,
                "{:<18} {:>2} {:>2} {:>4} {:>3} {:>3}  {:<8} {:<24} {:>7.4} {:>7.4}",
                name,
                mark(cfg.ss),
                mark(cfg.lr),
                ecre,
                mark(cfg.seb),
                mark(cfg.dap),
                levels.join(","),
                per_seed.join(" "),
                med,
                mn
            );
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(
                out,
                "  ! {} seed {}: {}",
                r.name,
                r.seed,
                r.error.as_deref().unwrap_or("")
            );
        }
        out.push('\n');
        out.push_str(REFERENCE_FOOTER);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,seed,miou,per_class,error,config\n");
        for r in &self.rows {
            let per_class: Vec<String> = r.per_class.iter().map(|v| format!("{v}")).collect();
            let config_line = r.config.emit().lines().collect::<Vec<_>>().join("; ");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                quote(&r.name),
                r.seed,
                r.miou,
                quote(&per_class.join(" ")),
                quote(r.error.as_deref().unwrap_or("")),
                quote(&config_line)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty CSV".into()))?;
        if header != "name,seed,miou,per_class,error,config" {
            return Err(Error::Config(format!("unexpected CSV header `{header}`")));
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields = split_csv(line)?;
            if fields.len() != 6 {
                return Err(Error::Config(format!("expected 6 CSV fields, got {}", fields.len())));
            }
            let seed: u64 = fields[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{}`", fields[1])))?;
            let miou: f64 = fields[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad miou `{}`", fields[2])))?;
            let per_class: Vec<f64> = if fields[3].is_empty() {
                Vec::new()
            } else {
                fields[3]
                    .split(' ')
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("bad IoU `{v}`"))))
                    .collect::<Result<_>>()?
            };
            let config = ModelConfig::parse(&fields[5].replace("; ", "\n"))?;
            rows.push(AblationRow {
                name: fields[0].clone(),
                config,
                seed,
                miou,
                per_class,
                error: (!fields[4].is_empty()).then(|| fields[4].clone()),
            });
        }
        Ok(AblationReport { rows })
    }
}

/// Paper-scale context for the footer of every report (PASCAL VOC 2012 val,
/// mIoU%): not reproduced at this scale, listed for orientation only.
pub const REFERENCE_FOOTER: &str = "reference (paper-scale, VOC 2012 val mIoU%): baseline 76.0, \
+SS 77.5, +LR 78.3, +ECRE 78.8, +SEB 79.0, +DAP 79.6, all 80.0\n";

/// The fixed desk-scale measurement protocol: 64×64 inputs, 5 classes,
/// 512 train / 128 eval samples, 40 epochs, batch 8, seeds {1, 2, 3}.
pub mod protocol {
    use crate::config::TrainConfig;
    use crate::data::{gen_synthetic, Dataset};
    use crate::error::Result;

    pub const INPUT_SIZE: usize = 64;
    pub const CLASSES: usize = 5;
    pub const TRAIN_SAMPLES: usize = 512;
    pub const EVAL_SAMPLES: usize = 128;
    pub const EPOCHS: usize = 40;
    pub const BATCH: usize = 8;
    pub const SEEDS: [u64; 3] = [1, 2, 3];
    /// Data seeds are fixed and disjoint from the training seeds.
    pub const TRAIN_DATA_SEED: u64 = 1001;
    pub const EVAL_DATA_SEED: u64 = 2002;

    pub fn train_config() -> TrainConfig {
        TrainConfig {
            epochs: EPOCHS,
            batch_size: BATCH,
            ..Default::default()
        }
    }

    pub fn datasets() -> Result<(Dataset, Dataset)> {
        Ok((
            gen_synthetic(TRAIN_DATA_SEED, TRAIN_SAMPLES, INPUT_SIZE, CLASSES)?,
            gen_synthetic(EVAL_DATA_SEED, EVAL_SAMPLES, INPUT_SIZE, CLASSES)?,
        ))
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn split_csv(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut in_quotes = false;
    while let Some(c) = chars.next() {
        match (in_quotes, c) {
            (false, ',') => fields.push(std::mem::take(&mut cur)),
            (false, '"') => in_quotes = true,
            (false, c) => cur.push(c),
            (true, '"') => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    in_quotes = false;
                }
            }
            (true, c) => cur.push(c),
        }
    }
    if in_quotes {
        return Err(Error::Config("unterminated quote in CSV".into()));
    }
    fields.push(cur);
    Ok(fields)
}
