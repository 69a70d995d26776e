use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use damtl_cli::config::resolve_threads;
use damtl_cli::experiment::{cmd_eval, cmd_gradcheck, cmd_pretrain, cmd_split, cmd_train};
use damtl_cli::{CliError, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(name = "damtl", version, about = "Multi-task learning from a pretrained auxiliary network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the auxiliary network on the union of task classes.
    Pretrain(Common),
    /// Carve tasks from the base corpus and write the split manifest.
    Split(Common),
    /// Train all tasks jointly in the config's mode.
    Train(Common),
    /// Re-evaluate stored task checkpoints.
    Eval(Common),
    /// Train without the alignment term.
    Ablate(Common),
    /// Finite-difference check of every op and the full task loss.
    Gradcheck(Common),
}

fn load(common: &Common, required: bool) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if required => return Err(CliError::Config("--config <path> is required".into())),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut log = std::io::stdout();
    let env = std::env::var("DAMTL_THREADS").ok();
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&load(&c, true)?, &mut log),
        Command::Split(c) => cmd_split(&load(&c, true)?, &mut log),
        Command::Train(c) => {
            let cfg = load(&c, true)?;
            let threads = resolve_threads(env.as_deref(), cfg.split.tasks)?;
            cmd_train(&cfg, cfg.mode, threads, &mut log).map(drop)
        }
        Command::Ablate(c) => {
            let cfg = load(&c, true)?;
            let threads = resolve_threads(env.as_deref(), cfg.split.tasks)?;
            cmd_train(&cfg, Mode::Ablate, threads, &mut log).map(drop)
        }
        Command::Eval(c) => cmd_eval(&load(&c, true)?, &mut log).map(drop),
        Command::Gradcheck(c) => cmd_gradcheck(&load(&c, false)?, &mut log),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("damtl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
