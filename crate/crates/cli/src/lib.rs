//! Command-line front end: `stats`, `merge`, `bench` and `report`.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_json, BenchRunConfig, RunConfig, StatsConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "obim",
    version,
    about = "Merge fine-tuned checkpoints of a shared base model"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Never changes outputs.
    #[arg(long, global = true, env = "OBIM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON configuration file. Relative paths inside it are resolved
    /// against its directory.
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect per-layer input statistics from calibration inputs.
    Stats {
        #[command(flatten)]
        config: ConfigArg,
        /// Override `output_path`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Merge checkpoints and write the merged checkpoint plus a CSV report
    /// (columns: method, model, path, ratio, kept, total, overlap,
    /// disjoint, sign_conflict_fraction, deviation_fraction).
    Merge {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the merge seed (DARE drops and random scores).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the merge method, e.g. TA, TIES, DARE, TIES+OBM, TIES+IM, OBIM.
        #[arg(long)]
        method: Option<String>,
        /// Override `output_path`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print the effective configuration as JSON and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run a planted benchmark and emit a CSV report (columns: method,
    /// task_id, loss_base, loss_finetuned, loss_merged,
    /// sign_conflict_fraction, deviation_fraction, kept_0 .. kept_{K-1}).
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the suite seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this method.
        #[arg(long)]
        method: Option<String>,
        /// Override `output_path`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Interference statistics of the checkpoint at `output_path` of a
    /// merge configuration (columns: sign_conflict_fraction,
    /// deviation_fraction).
    Report {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Flag paths are relative to the working directory, not the config.
fn absolute(p: &Path) -> CliResult<String> {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()
            .map_err(|e| CliError::new("io", e.to_string()))?
            .join(p)
    };
    Ok(abs.to_string_lossy().into_owned())
}

/// Runs one command and returns what it prints on stdout.
pub fn execute(command: &Command) -> CliResult<String> {
    match command {
        Command::Stats { config, output } => {
            let mut cfg: StatsConfig = load_json(&config.config)?;
            if let Some(o) = output {
                cfg.output_path = absolute(o)?;
            }
            let summary = commands::cmd_stats(&cfg, &config_dir(&config.config))?;
            Ok(summary.render())
        }
        Command::Merge {
            config,
            seed,
            method,
            output,
            print_config,
        } => {
            let mut cfg: RunConfig = load_json(&config.config)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(m) = method {
                cfg.method = m.clone();
            }
            if let Some(o) = output {
                cfg.output_path = absolute(o)?;
            }
            if *print_config {
                let eff = cfg.effective()?;
                return Ok(serde_json::to_string_pretty(&eff).expect("config serializes") + "\n");
            }
            let run = commands::cmd_merge(&cfg, &config_dir(&config.config))?;
            Ok(if cfg.report_path.is_some() {
                String::new()
            } else {
                run.report
            })
        }
        Command::Bench {
            config,
            seed,
            method,
            output,
        } => {
            let mut cfg: BenchRunConfig = load_json(&config.config)?;
            if let Some(s) = seed {
                cfg.bench.suite.seed = *s;
            }
            if let Some(m) = method {
                let m = m
                    .parse()
                    .map_err(|e: obim_core::Error| CliError::from(e).at("methods"))?;
                cfg.bench.methods = vec![m];
            }
            if let Some(o) = output {
                cfg.output_path = Some(absolute(o)?);
            }
            let csv = commands::cmd_bench(&cfg, &config_dir(&config.config))?;
            Ok(if cfg.output_path.is_some() { String::new() } else { csv })
        }
        Command::Report { config } => {
            let cfg: RunConfig = load_json(&config.config)?;
            let (_, text) = commands::cmd_report(&cfg, &config_dir(&config.config))?;
            Ok(if cfg.report_path.is_some() { String::new() } else { text })
        }
    }
}

/// Sets up the thread pool, runs the command and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            let e = CliError::new("usage", "--threads must be at least 1").at("threads");
            eprintln!("{}", e.to_json());
            return e.exit_code();
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            let e = CliError::new("usage", e.to_string()).at("threads");
            eprintln!("{}", e.to_json());
            return e.exit_code();
        }
    };
    match pool.install(|| execute(&cli.command)) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
