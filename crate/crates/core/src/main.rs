use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use siclat::cli::{self, RunConfig, TrainOverrides};
use siclat::train::TrainMode;
use siclat::Error;

#[derive(Parser)]
#[command(name = "siclat", version, about = "Episodic in-context adaptation training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (base, sicl_at1, sicl_at2, sicl_at3, sft_baseline, cv_transfer)
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Dotted override, e.g. `train.total_steps=200`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn run_config(&self) -> RunConfig {
        RunConfig { config: self.config.clone(), preset: self.preset.clone(), seed: self.seed, overrides: self.overrides.clone() }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SiclAt,
    Sft,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the experiment's datasets as manifests
    Gen(Common),
    /// Train a model
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from a training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load manifests from this directory instead of generating data
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint zero-shot and few-shot
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Join the reports of several run directories
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the comparison as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let exp = cli::resolve(&c.run_config())?;
            print!("{}", cli::cmd_gen(&exp, &c.out)?);
        }
        Command::Train { common, init, resume, data, mode, k, steps } => {
            let mut exp = cli::resolve(&common.run_config())?;
            let mode = mode.map(|m| match m {
                Mode::SiclAt => TrainMode::SiclAt,
                Mode::Sft => TrainMode::Sft,
            });
            TrainOverrides { mode, k, steps }.apply(&mut exp);
            let log = cli::cmd_train(&exp, &common.out, init.as_deref(), resume.as_deref(), data.as_deref())?;
            let n = log.steps.len() as u64;
            println!("trained {n} steps; final loss {:.4}", log.steps.last().map_or(f64::NAN, |s| s.loss));
            println!("model written to {}", common.out.join(cli::MODEL_FILE).display());
        }
        Command::Eval { common, checkpoint, data } => {
            let exp = cli::resolve(&common.run_config())?;
            cli::freeze(&exp, &common.out)?;
            let report = cli::cmd_eval(&exp, &checkpoint, &common.out, data.as_deref())?;
            print!("{}", report.render());
        }
        Command::Compare { runs, json } => {
            let cmp = cli::cmd_compare(&runs)?;
            print!("{}", cmp.render());
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&cmp)?).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, cli::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
