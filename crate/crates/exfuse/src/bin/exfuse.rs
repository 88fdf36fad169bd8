//! Command-line interface: dataset generation, training, evaluation, the
//! ablation harness, gradient checking and prediction export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use exfuse::ablate::{ablate, protocol, AblationGrid};
use exfuse::config::{ModelConfig, TrainConfig};
use exfuse::data::{
    export_image_ppm, export_labels_ppm, gen_synthetic, load_dataset, save_dataset, Dataset,
};
use exfuse::gradsuite;
use exfuse::tensor::Precision;
use exfuse::train::{evaluate, load_checkpoint, save_checkpoint, train};
use exfuse::Result;

#[derive(Parser)]
#[command(name = "exfuse", about = "Residual multi-level feature fusion for semantic segmentation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridPreset {
    /// Mechanism toggles from plain baseline to fully equipped.
    Mechanisms,
    /// Upsampling variants of the first decoder transition.
    EcreVariants,
    /// Feature-level subsets for baseline and fully equipped models.
    Levels,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint (plus `<out>.cfg`).
    Train {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: mean IoU and per-class IoU.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Average each score map with its horizontally flipped version.
        #[arg(long)]
        flip: bool,
    },
    /// Train and evaluate a grid of model variants over several seeds.
    Ablate {
        /// Grid file (`base.<key>` and `row.<name>` lines); or use --preset.
        #[arg(long, conflicts_with = "preset")]
        grid: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<GridPreset>,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Training dataset; generated per the fixed protocol when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation dataset; generated per the fixed protocol when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Training settings; protocol defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference gradient checks over ops, blocks and the tiny model.
    GradCheck {
        /// Check one op family (see --list).
        #[arg(long)]
        op: Option<String>,
        /// Check the tiny end-to-end model only.
        #[arg(long)]
        e2e: bool,
        /// Seeds per check.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        list: bool,
    },
    /// Export image / ground-truth / prediction PPM triptychs.
    ExportVis {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        flip: bool,
    },
}

fn read_dataset(path: &PathBuf) -> Result<Dataset> {
    load_dataset(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            classes,
            out,
        } => {
            let ds = gen_synthetic(seed, count, size, classes)?;
            save_dataset(&out, &ds)?;
            println!(
                "wrote {} samples ({}x{}, {} classes) to {}",
                count,
                size,
                size,
                classes,
                out.display()
            );
        }
        Command::Train {
            model_config,
            train_config,
            data,
            eval_data,
            out,
        } => {
            let mc = ModelConfig::parse(&std::fs::read_to_string(&model_config)?)?;
            let tc = TrainConfig::parse(&std::fs::read_to_string(&train_config)?)?;
            let ds = read_dataset(&data)?;
            let eval_ds = eval_data.as_ref().map(read_dataset).transpose()?;
            let (model, result) = train(&mc, &tc, &ds, eval_ds.as_ref())?;
            save_checkpoint(&out, &model)?;
            println!(
                "trained {} steps, final loss {:.5}, checkpoint at {}",
                result.losses.len(),
                result.losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            if let Some(eval_ds) = &eval_ds {
                let (miou, _) = evaluate(&model, eval_ds, false)?;
                println!("eval mIoU {miou:.4}");
            }
        }
        Command::Eval { ckpt, data, flip } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = read_dataset(&data)?;
            let (miou, per_class) = evaluate(&model, &ds, flip)?;
            println!("mIoU {miou:.4}");
            for (c, iou) in per_class.iter().enumerate() {
                println!("  class {c}: {iou:.4}");
            }
        }
        Command::Ablate {
            grid,
            preset,
            seeds,
            data,
            eval_data,
            train_config,
            out_dir,
        } => {
            let base = ModelConfig {
                classes: protocol::CLASSES,
                input_size: protocol::INPUT_SIZE,
                ..Default::default()
            };
            let grid = match (grid, preset) {
                (Some(path), _) => AblationGrid::parse(&std::fs::read_to_string(&path)?)?,
                (None, Some(GridPreset::Mechanisms)) => AblationGrid::mechanism_grid(&base),
                (None, Some(GridPreset::EcreVariants)) => AblationGrid::ecre_variant_grid(&base),
                (None, Some(GridPreset::Levels)) => AblationGrid::level_grid(&base),
                (None, None) => AblationGrid::mechanism_grid(&base),
            };
            let tc = match train_config {
                Some(path) => TrainConfig::parse(&std::fs::read_to_string(&path)?)?,
                None => protocol::train_config(),
            };
            let (train_ds, eval_ds) = match (&data, &eval_data) {
                (Some(d), Some(e)) => (read_dataset(d)?, read_dataset(e)?),
                (None, None) => protocol::datasets()?,
                (Some(d), None) => (read_dataset(d)?, protocol::datasets()?.1),
                (None, Some(e)) => (protocol::datasets()?.0, read_dataset(e)?),
            };
            let report = ablate(&grid, &tc, &train_ds, &eval_ds, &seeds)?;
            std::fs::create_dir_all(&out_dir)?;
            let table = report.text_table();
            std::fs::write(out_dir.join("report.txt"), &table)?;
            std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
            print!("{table}");
            println!("reports written to {}", out_dir.display());
        }
        Command::GradCheck {
            op,
            e2e,
            seeds,
            list,
        } => {
            if list {
                for name in gradsuite::OP_NAMES {
                    println!("{name}");
                }
                return Ok(());
            }
            let mut failed = false;
            let mut check = |name: &str| -> Result<()> {
                let mut worst: f64 = 0.0;
                for seed in 0..seeds {
                    let report = gradsuite::check_op(name, seed)?;
                    worst = worst.max(report.max_rel_err);
                }
                let ok = worst < 1e-5;
                failed |= !ok;
                println!("{name:<24} max rel err {worst:.3e}  {}", if ok { "ok" } else { "FAIL" });
                Ok(())
            };
            match (&op, e2e) {
                (Some(name), false) => check(name)?,
                (None, true) => {}
                (None, false) => {
                    for name in gradsuite::OP_NAMES {
                        check(name)?;
                    }
                }
                (Some(_), true) => {
                    return Err(exfuse::Error::Config("--op and --e2e are exclusive".into()))
                }
            }
            if e2e || op.is_none() {
                let mut worst: f64 = 0.0;
                for seed in 0..seeds {
                    let report = gradsuite::check_e2e(seed, 4)?;
                    worst = worst.max(report.max_rel_err);
                }
                let ok = worst < 1e-4;
                failed |= !ok;
                println!("end-to-end              max rel err {worst:.3e}  {}", if ok { "ok" } else { "FAIL" });
            }
            if failed {
                return Err(exfuse::Error::Config("gradient check failed".into()));
            }
        }
        Command::ExportVis {
            ckpt,
            data,
            out_dir,
            count,
            flip,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = read_dataset(&data)?;
            std::fs::create_dir_all(&out_dir)?;
            let n = count.min(ds.len());
            for i in 0..n {
                let (images, _) = ds.batch(&[i])?;
                let pred = model.predict(&images, flip, Precision::Single)?;
                let s = &ds.samples[i];
                export_image_ppm(out_dir.join(format!("{i:03}_image.ppm")), s)?;
                export_labels_ppm(out_dir.join(format!("{i:03}_truth.ppm")), s.h, s.w, &s.labels)?;
                export_labels_ppm(out_dir.join(format!("{i:03}_pred.ppm")), s.h, s.w, &pred.data)?;
            }
            println!("wrote {n} triptychs to {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
