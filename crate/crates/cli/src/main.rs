//! `robust-stopper <job> --config <path> [--out <dir>] [--seed <int>]`
//!
//! Exit codes: 0 success, 2 config error, 3 invariant failure, 4 budget error.

mod config;
mod jobs;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use config::ExperimentConfig;
use jobs::Context;
use output::{Artifacts, Failure, EXIT_CONFIG, EXIT_INVARIANT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Job {
    Value,
    Saddle,
    OracleCheck,
    Converge,
    Rho,
}

impl Job {
    fn name(self) -> &'static str {
        match self {
            Job::Value => "value",
            Job::Saddle => "saddle",
            Job::OracleCheck => "oracle-check",
            Job::Converge => "converge",
            Job::Rho => "rho",
        }
    }
}

#[derive(Debug, Parser)]
#[command(version, about = "Robust optimal stopping experiments on a binomial lattice")]
struct Cli {
    #[arg(value_enum)]
    job: Job,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampled saddle deviations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ROBUST_STOPPER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::config(
            "env",
            "ROBUST_STOPPER_THREADS",
            format!("`{raw}` is not a positive integer"),
            "unset it or give a thread count",
        )
    })?;
    // Fails only if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    threads()?;
    let (cfg, raw) = ExperimentConfig::load(&cli.config)?;
    if let Some(job) = &cfg.job {
        if job != cli.job.name() {
            return Err(Failure::config(
                "config",
                "job",
                format!("config names job `{job}` but `{}` was requested", cli.job.name()),
                "drop the job field or run the matching job",
            ));
        }
    }
    // Validate the lattice before touching the filesystem.
    if cli.job != Job::Converge {
        cfg.model()?;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut out = Artifacts::create(dir)?;
    let result = {
        let mut ctx = Context {
            cfg: &cfg,
            out: &mut out,
            seed: cli.seed,
        };
        match cli.job {
            Job::Value => jobs::value(&mut ctx),
            Job::Saddle => jobs::saddle(&mut ctx),
            Job::OracleCheck => jobs::oracle_check(&mut ctx),
            Job::Converge => jobs::converge(&mut ctx),
            Job::Rho => jobs::rho(&mut ctx),
        }
    };
    match result {
        Ok(()) => out.finish(cli.job.name(), &raw, cli.seed, true),
        Err(f) if f.code == EXIT_INVARIANT => {
            out.finish(cli.job.name(), &raw, cli.seed, false)?;
            Err(f)
        }
        Err(f) => Err(f),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code)
        }
    }
}
