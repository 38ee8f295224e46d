use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use donn_core::dataio::{export_mask, load_checkpoint, save_checkpoint, MaskFormat};
use donn_core::error::ErrorClass;
use donn_core::slr::{slr_sparsify, slr_trace_csv, InnerSettings};
use donn_core::smoothing::smoothing_csv;
use donn_core::train::run::{
    evaluate, load_datasets, loss_curve_csv, roughness_csv, smooth2pi, sweep, sweep_csv, train, SweepAxis,
};
use donn_core::train::{Preset, TrainConfig};
use donn_core::DonnError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "donn", version, about = "Train, sparsify and smooth diffractive optical networks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML document layered over the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train one rung of the ablation ladder
    Train,
    /// Test accuracy of a checkpoint
    Evaluate { checkpoint: PathBuf },
    /// Block-sparsify a checkpoint
    Sparsify { checkpoint: PathBuf },
    /// Add 0/2π per pixel to lower roughness without changing predictions
    Smooth2pi { checkpoint: PathBuf },
    /// Per-layer roughness under both neighborhoods
    Report { checkpoint: PathBuf },
    /// One training run per value of a hyperparameter
    Sweep {
        #[arg(long, value_parser = ["sparsity_ratio", "ratio", "p", "q"])]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Write one layer's phases as CSV or 16-bit PGM
    ExportMask {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value = "pgm", value_parser = ["pgm", "csv"])]
        format: String,
    },
}

fn load_config(g: &GlobalArgs) -> Result<TrainConfig> {
    let preset: Preset = g.preset.parse()?;
    let mut cfg = TrainConfig::load(preset, g.config.as_deref(), std::env::vars())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = cfg.hash()?;

    match cli.command {
        Command::Train => {
            let (train_set, test_set) = load_datasets(&cfg)?;
            let result = train(&cfg, &train_set, &test_set)?;
            save_checkpoint(&result.model, out.join("model.ckpt"), &hash)?;
            if let Some(smoothed) = &result.smoothed {
                save_checkpoint(smoothed, out.join("model.smoothed.ckpt"), &hash)?;
                write(out, "smoothing.csv", smoothing_csv(&result.report.smoothing))?;
            }
            if !result.report.slr_trace.is_empty() {
                write(out, "slr_trace.csv", slr_trace_csv(&result.report.slr_trace))?;
            }
            write(out, "loss.csv", loss_curve_csv(&result.report.loss_curve))?;
            write(out, "roughness.csv", roughness_csv(&result.model))?;
            write(out, "report.json", result.report.to_json()?)?;
            println!(
                "mode {} accuracy {:.4} R_overall {:.4}{}",
                cfg.mode,
                result.report.accuracy,
                result.report.roughness_before.overall,
                result
                    .report
                    .roughness_after
                    .as_ref()
                    .map(|r| format!(" -> {:.4} after 2π smoothing", r.overall))
                    .unwrap_or_default()
            );
        }
        Command::Evaluate { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let (_, test_set) = load_datasets(&cfg)?;
            let accuracy = evaluate(&model, &test_set)?;
            let report = json!({ "checkpoint": checkpoint, "samples": test_set.len(), "accuracy": accuracy });
            write(out, "evaluate.json", serde_json::to_string_pretty(&report)?)?;
            println!("accuracy {accuracy:.4}");
        }
        Command::Sparsify { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            let reg = donn_core::autograd::Regularization {
                p: cfg.effective_p(),
                q: cfg.effective_q(),
                mode: cfg.neighbors,
                block_size: cfg.slr.block_size,
            };
            let inner = InnerSettings {
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                track_accuracy: true,
            };
            let (sparse, outcome) = slr_sparsify(&model, &train_set, &cfg.slr, &reg, inner)?;
            save_checkpoint(&sparse, out.join("model.ckpt"), &hash)?;
            write(out, "slr_trace.csv", slr_trace_csv(&outcome.trace))?;
            let accuracy = evaluate(&sparse, &test_set)?;
            let zeroed: Vec<usize> = sparse
                .masks()
                .iter()
                .map(|m| m.block_mask.as_ref().map_or(0, |b| b.zeroed_count()))
                .collect();
            let report = json!({ "accuracy": accuracy, "zeroed_blocks": zeroed, "outer_iterations": outcome.state.k });
            write(out, "sparsify.json", serde_json::to_string_pretty(&report)?)?;
            println!("accuracy {accuracy:.4} zeroed blocks per layer {zeroed:?}");
        }
        Command::Smooth2pi { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let (_, test_set) = load_datasets(&cfg)?;
            let res = smooth2pi(&model, cfg.neighbors, &cfg.gs, cfg.seed, &test_set)?;
            save_checkpoint(&res.model, out.join("model.smoothed.ckpt"), &hash)?;
            write(out, "smoothing.csv", smoothing_csv(&res.layers))?;
            let report = json!({
                "R_before": res.before.overall,
                "R_after": res.after.overall,
                "accuracy": res.accuracy,
                "layers": res.layers,
            });
            write(out, "smooth2pi.json", serde_json::to_string_pretty(&report)?)?;
            println!("R_overall {:.4} -> {:.4}", res.before.overall, res.after.overall);
        }
        Command::Report { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let csv = roughness_csv(&model);
            write(out, "roughness.csv", &csv)?;
            print!("{csv}");
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            let rows = sweep(&cfg, axis, &values, &train_set, &test_set);
            let csv = sweep_csv(&rows);
            write(out, "sweep.csv", &csv)?;
            print!("{csv}");
        }
        Command::ExportMask {
            checkpoint,
            layer,
            format,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let format: MaskFormat = format.parse()?;
            let mask = model.masks().get(layer).ok_or_else(|| {
                DonnError::InvalidArgument(format!("layer {layer} out of range for depth {}", model.depth()))
            })?;
            let ext = match format {
                MaskFormat::Csv => "csv",
                MaskFormat::Pgm => "pgm",
            };
            let path = out.join(format!("layer{layer}.{ext}"));
            export_mask(&mask.phase, &path, format)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<DonnError>()).map(DonnError::class) {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Divergence) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
