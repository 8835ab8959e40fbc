use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedfetch::experiment::{self, comparison_csv, ComparisonRow, ExperimentConfig, RunOutput, SweepParam};

/// Trace-driven simulator for prefetching in federated learning.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of rounds.
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One run per parameter value, plus a sweep.csv comparing them.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of R, alpha, beta, oc.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fixed one-round window, fixed R-round window and the adaptive
    /// scheduler on the same seed.
    CompareNaive {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
}

fn load(path: &Path, seed: Option<u64>, rounds: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn report(label: &str, out: &RunOutput) {
    let m = out.metrics();
    println!(
        "{label}: rounds={} FT={:.1}s TT={:.1}s FV={}B TV={}B target={} acc={}",
        m.rounds,
        m.fetch_time,
        m.total_time,
        m.fetch_volume,
        m.total_volume,
        out.summary.rounds_to_target.map_or("-".into(), |r| r.to_string()),
        out.summary.final_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
    );
}

fn write_table(out: &Path, runs: &[(ComparisonRow, RunOutput)]) -> Result<()> {
    for (row, run) in runs {
        let dir = out.join(row.variant.replace([':', '='], "_"));
        run.write(&dir)?;
        report(&row.variant, run);
    }
    let rows: Vec<ComparisonRow> = runs.iter().map(|(r, _)| r.clone()).collect();
    let path = out.join("sweep.csv");
    fs::write(&path, comparison_csv(&rows)?).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            rounds,
            out,
        } => {
            let cfg = load(&config, seed, rounds)?;
            log::info!("running {} rounds with seed {}", cfg.rounds, cfg.seed);
            let run = experiment::run(&cfg)?;
            run.write(&out)?;
            report("run", &run);
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
            out,
        } => {
            let cfg = load(&config, seed, None)?;
            log::info!("sweeping {param} over {values:?}");
            write_table(&out, &experiment::sweep(&cfg, param, &values)?)?;
        }
        Command::CompareNaive { config, seed, out } => {
            let cfg = load(&config, seed, None)?;
            if cfg.prefetch_rounds == 0 {
                bail!("compare-naive needs prefetch_rounds >= 1");
            }
            write_table(&out, &experiment::compare_naive(&cfg)?)?;
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    Ok(())
}
