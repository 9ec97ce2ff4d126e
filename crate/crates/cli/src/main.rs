use std::path::PathBuf;
use std::process::ExitCode;

use atkf_core::experiment::{cmd_eval, cmd_generate, cmd_reproduce, cmd_train, ExperimentConfig, Regime};
use atkf_core::Error;
use clap::{Args, Parser, Subcommand};

/// Attention Kalman filter experiments: data generation, training,
/// evaluation against EKF/UKF/PF baselines.
#[derive(Parser)]
#[command(name = "atkf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test datasets and the linearization trajectory.
    Generate(Common),
    /// Pre-train and train one network per regime and noise level.
    Train(Common),
    /// Evaluate every filter on the test sets and write results.csv.
    Eval(Common),
    /// Run generate, train and eval, then print the summary tables.
    Reproduce(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated noise levels q² = r², e.g. `1,4,16`.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Restrict to one regime.
    #[arg(long)]
    regime: Option<Regime>,
    /// Skip the pre-training phase.
    #[arg(long)]
    skip_pretrain: bool,
    /// Particle count of the particle filter.
    #[arg(long)]
    particles: Option<usize>,
    /// Write per-step true and estimated states of this test instance.
    #[arg(long, value_name = "INDEX")]
    trajectory_dump: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(levels) = &self.levels {
            cfg.noise_levels = levels.clone();
        }
        if let Some(regime) = self.regime {
            cfg.regimes = vec![regime];
        }
        if self.skip_pretrain {
            cfg.skip_pretrain = true;
        }
        if let Some(p) = self.particles {
            cfg.particles = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.config().map_err(|e| e.in_stage("config"))?;
            cmd_generate(&cfg).map_err(|e| e.in_stage("generate"))?;
            println!("datasets written to {}", cfg.out_dir.display());
        }
        Command::Train(args) => {
            let cfg = args.config().map_err(|e| e.in_stage("config"))?;
            for s in cmd_train(&cfg).map_err(|e| e.in_stage("train"))? {
                println!("{} q2={}: {} epochs, validation mse {:.4}", s.regime, s.level, s.log.len(), s.val_mse);
            }
        }
        Command::Eval(args) => {
            let cfg = args.config().map_err(|e| e.in_stage("config"))?;
            let rows = cmd_eval(&cfg, args.trajectory_dump).map_err(|e| e.in_stage("eval"))?;
            print!("{}", atkf_core::experiment::summary_table(&rows, &cfg.noise_levels));
        }
        Command::Reproduce(args) => {
            let cfg = args.config().map_err(|e| e.in_stage("config"))?;
            let (_, table) = cmd_reproduce(&cfg, args.trajectory_dump)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
