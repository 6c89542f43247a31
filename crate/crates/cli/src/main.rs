use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unmerge_core::harness::{execute, rerun, ExperimentConfig, Job};
use unmerge_core::mergeops::Operator;
use unmerge_core::protect::ProtectKind;
use unmerge_core::spaces::Space;
use unmerge_core::Error;

#[derive(Parser, Debug)]
#[command(name = "unmerge", version, about = "Scale-sensitive adapters and weight-merging experiments")]
struct Cli {
    /// TOML experiment configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set optimizer.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory for CSVs, artifacts and the manifest.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

fn operator(s: &str) -> Result<Operator, String> {
    Operator::parse(s).map_err(|e| e.to_string())
}

fn space(s: &str) -> Result<Space, String> {
    Space::parse(s).map_err(|e| e.to_string())
}

fn protect_kind(s: &str) -> Result<ProtectKind, String> {
    ProtectKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the shared base model and export the task data.
    Pretrain,
    /// Train one adapter, vanilla or protected.
    Train {
        #[arg(long)]
        task: usize,
        #[arg(long)]
        protected: bool,
        /// Fixed λ; without it the validation search over `selection.grid` runs.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Apply a post-hoc protection transform to a saved adapter.
    Protect {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long, value_parser = protect_kind)]
        kind: ProtectKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Merge saved adapters at a fixed coefficient and evaluate every task.
    Merge {
        #[arg(long = "adapter", required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long, value_parser = operator, default_value = "ta")]
        operator: Operator,
        #[arg(long, value_parser = space, default_value = "full")]
        space: Space,
        #[arg(long, default_value_t = 1.0)]
        coefficient: f64,
        #[arg(long, default_value_t = 1.0)]
        trim_keep: f64,
        #[arg(long, default_value_t = 0.0)]
        dare_rate: f64,
        #[arg(long, default_value_t = 0.16)]
        cart_fraction: f64,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Loss and accuracy of one adapter along `diagnostics.scale_grid`.
    SweepScale {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Linear path between two adapters with midpoint statistics.
    Interpolate {
        #[arg(long)]
        kappa: PathBuf,
        #[arg(long)]
        tau: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Accuracy of one adapter at `s = 1/N`.
    UniformAvg {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Coefficient grid search (with the operator's hyperparameter sweep).
    Gridsearch {
        #[arg(long = "adapter", required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long, value_parser = operator, default_value = "ta")]
        operator: Operator,
        #[arg(long, value_parser = space, default_value = "full")]
        space: Space,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Numerical checks of the degradation bounds and the stationarity toy.
    VerifyTheorems,
    /// The 8-way protected merging protocol.
    Table1,
    /// Pairwise merges and midpoint correlation over all ordered task pairs.
    PairwiseMatrix,
    /// Re-execute a run from its manifest and compare every output hash.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print the fully resolved configuration.
    ShowConfig,
}

impl Command {
    fn job(self) -> Option<Job> {
        Some(match self {
            Command::Pretrain => Job::Pretrain,
            Command::Train { task, protected, lambda, base } => Job::Train { task, protected, lambda, base },
            Command::Protect { adapter, kind, seed, base } => Job::Protect { adapter, base, kind, seed },
            Command::Merge { adapters, operator, space, coefficient, trim_keep, dare_rate, cart_fraction, base } => {
                Job::Merge { adapters, base, operator, space, coefficient, trim_keep, dare_rate, cart_fraction }
            }
            Command::SweepScale { adapter, base } => Job::SweepScale { adapter, base },
            Command::Interpolate { kappa, tau, base } => Job::Interpolate { kappa, tau, base },
            Command::UniformAvg { adapter, base } => Job::UniformAvg { adapter, base },
            Command::Gridsearch { adapters, operator, space, base } => Job::Gridsearch { adapters, base, operator, space },
            Command::VerifyTheorems => Job::VerifyTheorems,
            Command::Table1 => Job::Table1,
            Command::PairwiseMatrix => Job::PairwiseMatrix,
            Command::Rerun { .. } | Command::ShowConfig => return None,
        })
    }
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_numeric() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Command::Rerun { manifest } = &cli.command {
        return match rerun(manifest, &cli.out) {
            Ok(r) if r.mismatched.is_empty() => {
                println!("re-run reproduced {} outputs", r.checked);
                ExitCode::SUCCESS
            }
            Ok(r) => {
                eprintln!("re-run differs in: {}", r.mismatched.join(", "));
                ExitCode::from(2)
            }
            Err(e) => exit_for(&e),
        };
    }
    let cfg = match ExperimentConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => return exit_for(&e),
    };
    let Some(job) = cli.command.job() else {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    };
    match execute(&job, &cfg, &cli.out) {
        Ok(m) => {
            println!("{}: wrote {} outputs to {}", job.name(), m.outputs.len(), cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => exit_for(&e),
    }
}
