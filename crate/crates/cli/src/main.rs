use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{EvalMode, ExperimentConfig, Kind};

#[derive(Parser)]
#[command(name = "rdqn", version, about = "Distributionally robust DQN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network per game and evaluate it.
    Train(Common),
    /// Re-evaluate checkpoints from an earlier train run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Train run directory holding game_XXX/ subdirectories.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Worst-case distribution functions of the initial gamble state.
    CdfProbe(Common),
    /// Duality, nesting and small-regulariser checks for the dual solver.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Flip the sign of the regulariser term; the checks should then fail.
        #[arg(long)]
        mutate_sign: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse `<out>/<command>` instead of a fresh timestamped directory.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    True,
    Reference,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn prepare(common: &Common, kind: Kind, tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = common.load()?;
    tweak(&mut cfg);
    cfg.validate(kind)?;
    let dir = commands::run_dir(&cfg.out, kind, common.overwrite)?;
    println!("run directory: {}", dir.display());
    Ok((cfg, dir))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, dir) = prepare(&common, Kind::Train, |_| {})?;
            let s = commands::run_train(&cfg, &dir)?;
            println!("mean reward per step across games: {:.6} (q05 {:.6})", s.mean, s.q05);
        }
        Command::Eval { common, run, mode } => {
            let (cfg, dir) = prepare(&common, Kind::Eval, |c| {
                if let Some(m) = mode {
                    c.eval.mode = match m {
                        ModeArg::True => EvalMode::True,
                        ModeArg::Reference => EvalMode::Reference,
                    };
                }
            })?;
            let s = commands::run_eval(&cfg, Path::new(&run), &dir)
                .with_context(|| format!("evaluating {}", run.display()))?;
            println!("mean reward per step across games: {:.6} (q05 {:.6})", s.mean, s.q05);
        }
        Command::CdfProbe(common) => {
            let (cfg, dir) = prepare(&common, Kind::CdfProbe, |_| {})?;
            for f in commands::run_cdf_probe(&cfg, &dir)? {
                println!("wrote {}", f.display());
            }
        }
        Command::OracleCheck { common, mutate_sign } => {
            let (cfg, dir) = prepare(&common, Kind::OracleCheck, |_| {})?;
            return commands::run_oracle_check(&cfg, &dir, mutate_sign);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
