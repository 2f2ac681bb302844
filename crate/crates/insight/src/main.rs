//! Command-line interface: synth / train / eval / heatmap / ablate.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use insight::config::{resolve, Overrides};
use insight::error::AppError;
use insight::run::{
    cmd_ablate, cmd_eval, cmd_heatmap, cmd_synth, cmd_train, cmd_train_grid, EvalArgs,
    HeatmapArgs,
};
use insight_core::model::PoolingMode;
use insight_core::train::GridSpec;

#[derive(Parser)]
#[command(
    name = "insight",
    version,
    about = "Weakly-supervised bag aggregation with built-in heatmaps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Smoothmax,
    Max,
    Lp,
}

impl From<PoolingArg> for PoolingMode {
    fn from(v: PoolingArg) -> Self {
        match v {
            PoolingArg::Smoothmax => PoolingMode::SmoothMax,
            PoolingArg::Max => PoolingMode::Max,
            PoolingArg::Lp => PoolingMode::Lp,
        }
    }
}

#[derive(Args, Default)]
struct OverrideArgs {
    /// Seed for data generation, weight init, and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SmoothMax sharpness.
    #[arg(long)]
    alpha: Option<f64>,
    /// Spectral-decoupling strength.
    #[arg(long)]
    lambda_sd: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    /// Disable the context-suppression branch.
    #[arg(long)]
    no_context: bool,
    /// Disable Otsu masking.
    #[arg(long)]
    no_threshold: bool,
    /// Lesion signal strength for synthetic generation.
    #[arg(long)]
    signal_strength: Option<f64>,
    /// Bags averaged into one optimizer step.
    #[arg(long)]
    grad_accumulation: Option<usize>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_epochs: self.max_epochs,
            learning_rate: self.lr,
            alpha: self.alpha,
            lambda_sd: self.lambda_sd,
            label_smoothing: self.label_smoothing,
            pooling: self.pooling.map(Into::into),
            no_context: self.no_context,
            no_threshold: self.no_threshold,
            signal_strength: self.signal_strength,
            grad_accumulation: self.grad_accumulation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Train a model (optionally a full hyperparameter grid).
    Train {
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, history, and resolved config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run the hyperparameter grid and keep the best configuration.
        #[arg(long)]
        grid: bool,
        /// Epoch cap per grid point.
        #[arg(long)]
        grid_epochs: Option<usize>,
        /// Parallel workers for grid points.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Earlier report to run paired permutation tests against.
        #[arg(long)]
        comparator: Option<PathBuf>,
        /// Also score the gradient-saliency baseline.
        #[arg(long)]
        grad_cam: bool,
        /// Binarize heatmaps at a fixed threshold instead of Otsu.
        #[arg(long)]
        fixed_threshold: Option<f64>,
        /// Parallel workers over bags.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export a bag's heatmap channel as a PGM image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag file (.ieb).
        #[arg(long)]
        bag: PathBuf,
        /// Label channel to export.
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long)]
        out: PathBuf,
        /// Integer bicubic upsampling factor.
        #[arg(long, default_value_t = 1)]
        upsample: usize,
        /// Export the unmasked fused map instead of the thresholded one.
        #[arg(long)]
        raw: bool,
    },
    /// Train and score the four architecture-switch combinations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parallel workers over ablation rows.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

fn dispatch(cli: Cli) -> insight::Result<()> {
    match cli.command {
        Command::Synth { out, config, force, overrides } => {
            let cfg = resolve(config.as_deref(), &overrides.to_overrides())?;
            let manifest = cmd_synth(&cfg, &out, force)?;
            let counts: Vec<String> = manifest
                .splits
                .iter()
                .map(|(name, entries)| format!("{name}: {}", entries.len()))
                .collect();
            println!("wrote dataset to {} ({})", out.display(), counts.join(", "));
        }
        Command::Train { data, out, config, grid, grid_epochs, jobs, overrides } => {
            let cfg = resolve(config.as_deref(), &overrides.to_overrides())?;
            if grid {
                let outputs =
                    cmd_train_grid(&cfg, &data, &out, &GridSpec::default(), grid_epochs, jobs)?;
                let top = &outputs.leaderboard[0];
                println!(
                    "grid search done: best alpha={} lr={} lambda={} metric={:.4} ({} points)",
                    top.alpha,
                    top.learning_rate,
                    top.lambda_sd,
                    top.metric,
                    outputs.leaderboard.len()
                );
            } else {
                let outputs = cmd_train(&cfg, &data, &out)?;
                println!(
                    "trained {} epochs; best epoch {} with validation metric {:.4}",
                    outputs.model.history.len(),
                    outputs.model.best_epoch,
                    outputs.model.best_metric
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            comparator,
            grad_cam,
            fixed_threshold,
            jobs,
            config,
        } => {
            let cfg = resolve(config.as_deref(), &Overrides::default())?;
            let args = EvalArgs {
                checkpoint,
                data,
                split,
                out,
                comparator,
                grad_cam,
                fixed_threshold,
                jobs,
            };
            let report = cmd_eval(&cfg, &args)?;
            let auc: Vec<String> = report
                .auc
                .iter()
                .map(|a| a.map_or("-".into(), |v| format!("{v:.4}")))
                .collect();
            match report.dice_mean {
                Some(d) => println!("AUC [{}], mean Dice {:.4}", auc.join(", "), d),
                None => println!("AUC [{}] (no ground-truth masks)", auc.join(", ")),
            }
        }
        Command::Heatmap { checkpoint, bag, label, out, upsample, raw } => {
            let args = HeatmapArgs { checkpoint, bag, label, out: out.clone(), upsample, raw };
            let (h, w) = cmd_heatmap(&args)?;
            println!("wrote {h}x{w} heatmap to {}", out.display());
        }
        Command::Ablate { data, out, config, jobs, overrides } => {
            let cfg = resolve(config.as_deref(), &overrides.to_overrides())?;
            let rows = cmd_ablate(&cfg, &data, &out, jobs)?;
            for row in &rows {
                println!(
                    "CS={} SM={} Rg={}: dice={}",
                    row.context_suppression as u8,
                    row.smoothmax as u8,
                    row.regularizer as u8,
                    row.dice_mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(AppError::exit_code(&e) as u8)
        }
    }
}
