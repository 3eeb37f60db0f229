//! Experiment runner: `run` executes a configured federated training run
//! and writes report files, `gradcheck` verifies every analytic gradient
//! against finite differences, and `partition-inspect` prints the
//! per-client class distribution a config would produce.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sentinel_core::config::RunConfig;
use sentinel_core::report::{partition_table, write_atomic, write_run_artifacts};
use sentinel_core::run::{build_dataset, build_partition, execute_run};

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Personalized federated IDS training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full federated experiment and write rounds.csv plus summaries.
    Run {
        /// Path to the flat TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker thread count override (0 = one per core).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        /// Random instances per checked loss.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Print and save the per-client class-count table for a config.
    PartitionInspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> sentinel_core::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&path.display().to_string())?;
    if let Some(dir) = out {
        cfg.out_dir = dir.display().to_string();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> sentinel_core::Result<()> {
    let cfg = load_config(&config, out, seed, threads)?;
    let artifacts = execute_run(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    write_run_artifacts(&cfg, &artifacts, &out_dir)?;
    if let Some(last) = artifacts.reports.last() {
        let headline = match artifacts.variant {
            sentinel_core::model::Variant::FedAvg => "global",
            _ => "teacher",
        };
        let f1s: Vec<f64> = last
            .rows
            .iter()
            .filter(|r| r.model.name() == headline)
            .map(|r| r.macro_f1)
            .collect();
        let (mean, std) = sentinel_core::metrics::mean_std(&f1s)?;
        println!(
            "{} finished {} rounds: {headline} macro-F1 {:.4} ± {:.4}",
            artifacts.variant.name(),
            artifacts.reports.len(),
            mean,
            std
        );
    }
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> sentinel_core::Result<bool> {
    let results = sentinel_core::gradcheck::run_all(trials, seed);
    let mut all_ok = true;
    println!("{:<24} {:>14} {:>8}", "loss", "max rel err", "status");
    for r in &results {
        let ok = r.passed(1e-4);
        all_ok &= ok;
        println!(
            "{:<24} {:>14.3e} {:>8}",
            r.name,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(all_ok)
}

fn cmd_partition_inspect(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> sentinel_core::Result<()> {
    let cfg = load_config(&config, out, seed, None)?;
    let dataset = build_dataset(&cfg)?;
    let plan = build_partition(&cfg, &dataset)?;
    let (table, csv) = partition_table(&plan, &dataset.labels, dataset.num_classes);
    print!("{table}");
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| sentinel_core::SentinelError::io(out_dir.display().to_string(), e))?;
    let path = out_dir.join("partition.csv");
    write_atomic(&path, &csv)?;
    println!("table written to {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => cmd_run(config, out, seed, threads).map(|()| true),
        Command::Gradcheck { trials, seed } => cmd_gradcheck(trials, seed),
        Command::PartitionInspect { config, out, seed } => {
            cmd_partition_inspect(config, out, seed).map(|()| true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
