use clap::{Parser, Subcommand};
use curve::checkpoint::Checkpoint;
use curve::error::{CurveError, Result};
use curve::harness::{
    embeddings_csv, evaluate_metrics, evaluate_sequences, finetune_partial, histogram_csv,
    robustness_sweep, run_ablation, uncertainty_report, FINETUNE_FRACTIONS, ROBUSTNESS_GRID,
};
use curve::model::AblationMode;
use curve::scene::{generate_synthetic_dataset, read_dataset, write_dataset, Dataset, SynthConfig};
use curve::train::{split_dataset, train_model, SplitIndices, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "curve", about = "Causal uncertainty-aware scene-graph pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic confounded dataset as JSONL.
    GenData {
        /// Generator config JSON; omit for the default configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a loss-curve CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON; omit for the default configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV path; defaults to `<out>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and write metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One of: train, test, validate, ood.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per ablation mode and write a comparison JSON.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated mode list.
        #[arg(long, default_value = "full,no_intervention,no_uncertainty,threshold_only")]
        modes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under geometric noise across a sigma grid.
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sigma grid; defaults to the reference grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint to the OOD pool at several label fractions.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated label fractions from {0, 0.01, 0.05, 0.1, 1}.
        #[arg(long)]
        fractions: Option<String>,
        /// Override the per-fraction epoch budget (for quick runs).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write uncertainty histograms and sequence embeddings for a split.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn split_indices<'a>(splits: &'a SplitIndices, name: &str) -> Result<&'a [usize]> {
    match name {
        "train" => Ok(&splits.train),
        "test" => Ok(&splits.test),
        "validate" => Ok(&splits.validate),
        "ood" => Ok(&splits.ood),
        other => Err(CurveError::Config(format!(
            "unknown split '{other}'; expected train, test, validate, or ood"
        ))),
    }
}

fn load_ckpt_and_data(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset, SplitIndices)> {
    let ckpt = Checkpoint::load(ckpt)?;
    let ds = read_dataset(data)?;
    let splits = split_dataset(&ds, &ckpt.config)?;
    Ok((ckpt, ds, splits))
}

fn parse_grid(spec: &Option<String>) -> Result<Vec<f64>> {
    match spec {
        None => Ok(ROBUSTNESS_GRID.to_vec()),
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| CurveError::Config(format!("bad grid value '{x}'")))
            })
            .collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg: SynthConfig = read_json_config(&config)?;
            let ds = generate_synthetic_dataset(&cfg)?;
            write_dataset(&out, &ds)?;
            println!(
                "wrote {} sequences ({} OOD) to {}",
                ds.samples.len(),
                cfg.num_ood_sequences,
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            curve,
        } => {
            let cfg: TrainConfig = read_json_config(&config)?;
            let ds = read_dataset(&data)?;
            let outcome = train_model(&ds, &cfg)?;
            let splits = split_dataset(&ds, &cfg)?;
            let val = evaluate_metrics(&outcome.model, &ds, &splits.validate, &cfg, None)?;
            let ckpt = Checkpoint::from_model(&outcome.model, &cfg, outcome.epochs_done, outcome.adam_state);
            ckpt.save(&out)?;
            let curve_path =
                curve.unwrap_or_else(|| out.with_extension("curve.csv"));
            std::fs::write(&curve_path, outcome.curve.to_csv())?;
            println!(
                "trained {} epochs; validation acc {:.4}; checkpoint at {}",
                outcome.epochs_done,
                val.acc,
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
        } => {
            let (ckpt, ds, splits) = load_ckpt_and_data(&ckpt, &data)?;
            let idx = split_indices(&splits, &split)?;
            let model = ckpt.to_model()?;
            let report = evaluate_metrics(&model, &ds, idx, &ckpt.config, None)?;
            write_json(&out, &report)?;
            println!(
                "{split}: acc {:.4} auc {:.4} mcc {:.4} over {} sequences",
                report.acc, report.auc, report.mcc, report.num_samples
            );
        }
        Command::Ablate {
            data,
            config,
            modes,
            out,
        } => {
            let cfg: TrainConfig = read_json_config(&config)?;
            let ds = read_dataset(&data)?;
            let modes: Vec<AblationMode> = modes
                .split(',')
                .map(|m| AblationMode::parse(m.trim()))
                .collect::<Result<_>>()?;
            let results = run_ablation(&ds, &cfg, &modes)?;
            write_json(&out, &results)?;
            for r in &results {
                println!(
                    "{}: id acc {:.4}, ood acc {:.4}, ood avg_deg {:.2}",
                    r.mode, r.id_test.acc, r.ood.acc, r.ood.avg_degree
                );
            }
        }
        Command::Robustness {
            ckpt,
            data,
            grid,
            split,
            eval_seed,
            out,
        } => {
            let (ckpt, ds, splits) = load_ckpt_and_data(&ckpt, &data)?;
            let idx = split_indices(&splits, &split)?;
            let model = ckpt.to_model()?;
            let grid = parse_grid(&grid)?;
            let rows = robustness_sweep(&model, &ds, idx, &ckpt.config, &grid, eval_seed)?;
            write_json(&out, &rows)?;
            for (sigma, r) in &rows {
                println!("sigma {sigma}: acc {:.4} auc {:.4}", r.acc, r.auc);
            }
        }
        Command::Finetune {
            ckpt,
            data,
            fractions,
            epochs,
            out,
        } => {
            let (ckpt, ds, _) = load_ckpt_and_data(&ckpt, &data)?;
            let fractions: Vec<f64> = match fractions {
                None => FINETUNE_FRACTIONS.to_vec(),
                Some(s) => s
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| CurveError::Config(format!("bad fraction '{x}'")))
                    })
                    .collect::<Result<_>>()?,
            };
            let mut results = Vec::new();
            for f in fractions {
                let (res, _) = finetune_partial(&ckpt, &ds, f, epochs)?;
                println!(
                    "fraction {f}: acc {:.4} after {} epochs",
                    res.adapted.acc, res.epochs
                );
                results.push(res);
            }
            write_json(&out, &results)?;
        }
        Command::Report {
            ckpt,
            data,
            split,
            out,
        } => {
            let (ckpt, ds, splits) = load_ckpt_and_data(&ckpt, &data)?;
            let idx = split_indices(&splits, &split)?;
            let model = ckpt.to_model()?;
            std::fs::create_dir_all(&out)?;
            let evals = evaluate_sequences(&model, &ds, idx, &ckpt.config, None)?;
            let report = uncertainty_report(&evals);
            write_json(&out.join("uncertainty.json"), &report)?;
            std::fs::write(out.join("uncertainty_hist.csv"), histogram_csv(&report))?;
            std::fs::write(
                out.join("embeddings.csv"),
                embeddings_csv(&model, &ds, idx, &ckpt.config)?,
            )?;
            println!(
                "report for {} sequences written to {}",
                evals.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
