mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use cbexperts::evaluation::MspSource;
use cbexperts::fusion::FusionStrategy;
use clap::{Parser, Subcommand};

use commands::{AblationStrategy, Split};
use config::LoadedConfig;
use error::{CliError, CliResult};

/// Long-tailed classification with an ensemble of class-balanced experts.
#[derive(Debug, Parser)]
#[command(name = "cbexperts", version)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic bundle described by [dataset.generate].
    GenData { config: PathBuf },
    /// Train the baseline and its class-balanced finetune.
    TrainBaseline { config: PathBuf },
    /// Train the three experts, running the hyperparameter grid.
    TrainExperts { config: PathBuf },
    /// Write a model's posteriors on one split.
    DumpPosteriors {
        config: PathBuf,
        /// A checkpoint or a fusion file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
    },
    /// Fit a fusion strategy on the validation split.
    TrainFusion {
        config: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<FusionStrategy>,
    },
    /// Evaluate a fused ensemble, or a single checkpoint, on the test split.
    Evaluate {
        config: PathBuf,
        #[arg(long, value_parser = parse_strategy, conflicts_with = "model")]
        strategy: Option<FusionStrategy>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Oracle accuracy: each sample judged by the expert owning its label.
    Oracle { config: PathBuf },
    /// Take-one-out table over full-posterior dumps.
    Ablate {
        config: PathBuf,
        #[arg(long, num_args = 2.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "softvote")]
        strategy: AblationStrategy,
        /// Validation dumps for the calibrated ablation, same order as --models.
        #[arg(long, num_args = 1..)]
        val_models: Vec<PathBuf>,
    },
    /// Expert confusion matrices and confidence histograms.
    Report {
        config: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<FusionStrategy>,
        #[arg(long, value_parser = parse_msp, default_value = "expanded")]
        msp: MspSource,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn parse_strategy(s: &str) -> Result<FusionStrategy, String> {
    s.parse().map_err(|e: cbexperts::Error| e.to_string())
}

fn parse_msp(s: &str) -> Result<MspSource, String> {
    match s {
        "expanded" => Ok(MspSource::Expanded),
        "partial" => Ok(MspSource::Partial),
        other => Err(format!("unknown msp source `{other}`")),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("usage", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config("usage", e.to_string()))?;
    }
    let load = |p: &PathBuf| LoadedConfig::load(p);
    let or_default = |cfg: &LoadedConfig, s: Option<FusionStrategy>| s.unwrap_or(cfg.config.fusion.strategy);
    match cli.command {
        Command::GenData { config } => commands::gen_data(&load(&config)?),
        Command::TrainBaseline { config } => commands::train_baseline_cmd(&load(&config)?),
        Command::TrainExperts { config } => commands::train_experts_cmd(&load(&config)?),
        Command::DumpPosteriors { config, model, split } => commands::dump_posteriors(&load(&config)?, &model, split),
        Command::TrainFusion { config, strategy } => {
            let cfg = load(&config)?;
            commands::train_fusion(&cfg, or_default(&cfg, strategy))
        }
        Command::Evaluate { config, strategy, model } => {
            let cfg = load(&config)?;
            match model {
                Some(m) => commands::evaluate_model(&cfg, &m),
                None => commands::evaluate(&cfg, or_default(&cfg, strategy)),
            }
        }
        Command::Oracle { config } => commands::oracle(&load(&config)?),
        Command::Ablate {
            config,
            models,
            split,
            strategy,
            val_models,
        } => commands::ablate(&load(&config)?, &models, split, strategy, &val_models),
        Command::Report {
            config,
            strategy,
            msp,
            bins,
        } => {
            let cfg = load(&config)?;
            commands::report(&cfg, or_default(&cfg, strategy), msp, bins)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::config("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code as u8)
        }
    }
}
