use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddfg::config::RunConfig;
use ddfg::{harness, Error};

#[derive(Parser)]
#[command(name = "ddfg", version, about = "Train and evaluate dynamic deep factor graph agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Print the factor structure used at every step.
        #[arg(long)]
        dump_structures: bool,
    },
    /// Exhaustive optimum and random-policy baseline for a configuration's environment.
    Oracle {
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = match resume {
                Some(ckpt) => harness::resume(&ckpt, Some(cfg.train.total_steps))?,
                None => harness::train(cfg)?,
            };
            let last = outcome.rows.last().map(|r| r.eval_return_median);
            println!("output: {}", outcome.output_dir.display());
            println!("env_steps: {}", outcome.trainer.env_steps());
            if let Some(m) = last {
                println!("last_eval_median: {m}");
            }
        }
        Command::Eval { checkpoint, episodes, dump_structures } => {
            let report = harness::eval_checkpoint(&checkpoint, episodes)?;
            print!("{}", harness::format_eval(&report, dump_structures));
        }
        Command::Oracle { config, episodes } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", harness::oracle_report(&cfg, episodes)?);
        }
        Command::Selftest => {
            let lines = harness::selftest();
            let mut ok = true;
            for l in &lines {
                println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
                ok &= l.passed;
            }
            if !ok {
                return Err(Error::InvalidArgument("self-test failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
