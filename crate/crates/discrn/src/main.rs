//! Command-line driver: run experiments, compare recorded trajectories,
//! and probe the inner solver against the KKT oracle.

use clap::{Parser, Subcommand};
use discrn::harness::{self, ExperimentConfig, HarnessError};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "discrn",
    about = "Nested distributed stochastic optimization experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config, writing CSVs and a summary.
    Run {
        config: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Size of the worker thread pool (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Write a per-iteration trace CSV for every inner solve.
        #[arg(long)]
        trace_inner: bool,
    },
    /// Compare the metrics CSVs previously written into a directory.
    Compare {
        dir: PathBuf,
        /// Plateau threshold as a fraction of total descent.
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
    },
    /// Solve random inner instances and report accuracy vs. the oracle.
    OracleCheck {
        config: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of probe instances.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Size of the worker thread pool (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("warning: could not configure {t} threads: {e}");
        }
    }
}

fn load_config(
    path: &std::path::Path,
    seed: Option<u64>,
) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn cmd_run(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    trace_inner: bool,
) -> Result<(), HarnessError> {
    let cfg = load_config(&config, seed)?;
    let out_dir = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}", cfg.name)));
    let outcome = harness::run_experiment(&cfg, &out_dir, trace_inner)?;

    println!("experiment {} -> {}", cfg.name, out_dir.display());
    println!(
        "{:<10} {:>6} {:>14} {:>14} {:>9} {:>8}",
        "method", "iters", "final_f_hat", "final_disagr", "plateau@", "ratio"
    );
    for m in &outcome.summary.methods {
        println!(
            "{:<10} {:>6} {:>14.6e} {:>14.6e} {:>9} {:>8.3}",
            m.method,
            m.iterations_run,
            m.final_f_hat,
            m.final_disagreement,
            m.iters_to_plateau,
            m.ratio_vs_baseline
        );
        if !m.plateau_detected {
            println!(
                "  note: {} trajectory has not flattened (plateau undetected)",
                m.method
            );
        }
    }
    if let Some(s) = outcome.summary.experiment.recommended_batch_size {
        println!("analysis-recommended batch size: {s:.3e} (advisory)");
    }
    Ok(())
}

fn cmd_compare(dir: PathBuf, tau: f64) -> Result<(), HarnessError> {
    let cmp = harness::compare_dir(&dir, tau)?;
    println!(
        "plateau comparison (tau = {}, baseline = {})",
        cmp.tau, cmp.baseline
    );
    println!(
        "{:<10} {:>14} {:>9} {:>8} {:>10}",
        "method", "plateau", "iters", "ratio", "flattened"
    );
    for e in &cmp.entries {
        println!(
            "{:<10} {:>14.6e} {:>9} {:>8.3} {:>10}",
            e.method, e.plateau_value, e.iters_to_plateau, e.ratio_vs_baseline, e.plateau_detected
        );
    }
    Ok(())
}

fn cmd_oracle_check(
    config: PathBuf,
    seed: Option<u64>,
    instances: usize,
) -> Result<(), HarnessError> {
    let cfg = load_config(&config, seed)?;
    let report = harness::oracle_check(&cfg, instances)?;
    println!(
        "oracle check: {} instances, delta = {}",
        report.rows.len(),
        report.delta
    );
    println!(
        "max ||p~ - p*|| = {:.3e}, mean inner iterations = {:.1}, max budget drift = {:.3e}",
        report.max_error, report.mean_iterations, report.max_budget_drift
    );
    if report.pass {
        println!("PASS: every solve within delta of the oracle solution");
        Ok(())
    } else {
        println!("FAIL: accuracy target exceeded");
        Err(HarnessError::AccuracyTarget {
            max_error: report.max_error,
            delta: report.delta,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
            trace_inner,
        } => {
            init_threads(threads);
            cmd_run(config, seed, out, trace_inner)
        }
        Command::Compare { dir, tau } => cmd_compare(dir, tau),
        Command::OracleCheck {
            config,
            seed,
            instances,
            threads,
        } => {
            init_threads(threads);
            cmd_oracle_check(config, seed, instances)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_config_error() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}
