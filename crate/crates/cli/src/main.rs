// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Exit status 1: bad configuration or missing inputs. Exit status 2: the run itself failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "photon-da",
    version,
    about = "Single-photon depth reconstruction with unsupervised domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled source, unlabeled target and labeled test cubes.
    Simulate(Common),
    /// Supervised training on the labeled source set.
    Pretrain(Common),
    /// Adversarial adaptation to the unlabeled target set.
    Adapt(Common),
    /// Depth maps for every input cube.
    Predict(Common),
    /// Compare predicted depth maps against ground truth.
    Eval(Common),
    /// Finite-difference check of every differentiable op.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PHOTON_DA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("PHOTON_DA_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))
}

type Handler = fn(&commands::Context) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (name, common, f): (&str, Common, Handler) = match cli.command {
        Command::Simulate(c) => ("simulate", c, commands::simulate),
        Command::Pretrain(c) => ("pretrain", c, commands::pretrain),
        Command::Adapt(c) => ("adapt", c, commands::adapt),
        Command::Predict(c) => ("predict", c, commands::predict),
        Command::Eval(c) => ("eval", c, commands::eval),
        Command::Gradcheck(c) => ("gradcheck", c, commands::gradcheck),
    };
    let ctx = commands::Context::open(&common.config, common.seed, common.out)?;
    log::info!("{name}: seed {}, output {}", ctx.cfg.seed, ctx.out.display());
    f(&ctx)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
