//! `milcal`: scan-classification pipeline on embedding bags — synthetic data
//! generation, two-phase training, scoring, ensemble fusion, threshold
//! calibration, evaluation, and the fusion/threshold ablation table.
//!
//! Exit codes: 0 ok, 1 user error (bad inputs/arguments), 2 internal error.
//! Failures also emit one machine-readable JSON line on stderr.

mod manifest;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use milcal::data::Split;
use milcal::Error;

#[derive(Parser)]
#[command(name = "milcal", version, about = "MIL scan classification and multi-source calibration")]
struct Cli {
    /// Worker threads for multi-model scoring.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-source dataset from a shift spec.
    GenData {
        /// Shift spec JSON (sources, separation, per-source bias).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Slice embedding width.
        #[arg(long, default_value_t = 16)]
        d_in: usize,
        /// Slices per scan, inclusive range.
        #[arg(long, default_value_t = 24)]
        min_slices: usize,
        #[arg(long, default_value_t = 64)]
        max_slices: usize,
    },
    /// Phase 1: slice-level encoder pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: scan-level MIL training (optionally from a pretrained encoder).
    TrainMil {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint stem of a pretrained slice model whose encoder to reuse.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one or more model checkpoints over a split.
    Score {
        /// Checkpoint stem (repeatable).
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// CSV path (one model) or directory (several).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        k_eval: usize,
    },
    /// Fuse member score files into ensemble scores or decisions.
    Fuse {
        /// Member score CSV (repeatable).
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        /// uniform | weighted | majority
        #[arg(long, default_value = "uniform")]
        rule: String,
        /// Comma-separated member weights (weighted rule).
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// JSON array of per-member threshold maps (majority rule).
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep decision thresholds on labeled validation scores.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        /// Metadata CSV with labels (`scan_id,label,source`).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        source_count: usize,
        /// global | per-source
        #[arg(long, default_value = "per-source")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Challenge-metric report for predictions (or scores + thresholds).
    Evaluate {
        /// Hard predictions CSV (`scan_id,label`).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Probability CSV, thresholded via --thresholds.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Threshold map or calibration report JSON.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        source_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fusion-rule × threshold-mode comparison table on validation scores.
    Ablation {
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        source_count: usize,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> milcal::Result<()> {
    match cli.command {
        Command::GenData {
            spec,
            out,
            d_in,
            min_slices,
            max_slices,
        } => ops::cmd_gen_data(&spec, &out, cli.seed.unwrap_or(0), d_in, (min_slices, max_slices)),
        Command::Pretrain { config, data, out } => {
            ops::cmd_pretrain(&config, &data, &out, cli.seed)
        }
        Command::TrainMil {
            config,
            data,
            encoder,
            out,
        } => ops::cmd_train_mil(&config, &data, encoder.as_deref(), &out, cli.seed),
        Command::Score {
            model,
            data,
            split,
            out,
            k_eval,
        } => {
            let split: Split = split
                .parse()
                .map_err(|_| Error::InvalidParam(format!("unknown split `{split}`")))?;
            ops::cmd_score(&model, &data, split, &out, k_eval, cli.threads)
        }
        Command::Fuse {
            scores,
            rule,
            weights,
            thresholds,
            out,
        } => ops::cmd_fuse(&scores, &rule, weights.as_deref(), thresholds.as_deref(), &out),
        Command::Calibrate {
            scores,
            labels,
            source_count,
            mode,
            out,
        } => ops::cmd_calibrate(&scores, &labels, source_count, &mode, &out),
        Command::Evaluate {
            predictions,
            scores,
            thresholds,
            labels,
            source_count,
            out,
        } => ops::cmd_evaluate(
            predictions.as_deref(),
            scores.as_deref(),
            thresholds.as_deref(),
            &labels,
            source_count,
            &out,
        ),
        Command::Ablation {
            scores,
            labels,
            source_count,
            weights,
            out,
        } => ops::cmd_ablation(&scores, &labels, source_count, weights.as_deref(), &out).map(|_| ()),
    }
}

fn error_json(kind: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind, "message": message } })
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            error_json("user", &err.to_string());
            ExitCode::from(1)
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal error".into());
            error_json("internal", &message);
            ExitCode::from(2)
        }
    }
}
