//! Command-line driver for the UMM simulator.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use umm::config::{ConfigError, ScenarioConfig};
use umm::report::{compare, run_file_stem, run_one, write_csv, RunError, RunOutput, Summary};
use umm::sim::SimError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_INVARIANT: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "umm-sim", version, about = "Flood-and-prune multicast overlay simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (overlay size, seed) combination of a scenario config.
    /// Extra `--key=value` or `--section.key=value` arguments override the file.
    Run {
        config: PathBuf,
        /// Validate the config and exit without running anything.
        #[arg(long)]
        check: bool,
        /// Write an event trace next to each run's CSV.
        #[arg(long)]
        trace: bool,
        /// Runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare two summary files metric by metric.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Where to write the JSON diff.
        #[arg(long, default_value = "compare.json")]
        out: PathBuf,
    },
}

fn exit_code(e: &RunError) -> u8 {
    match e {
        RunError::Config(ConfigError::Read { .. }) => EXIT_IO,
        RunError::Config(_) | RunError::Sim(SimError::Params(_)) => EXIT_CONFIG,
        RunError::Sim(SimError::Invariant { .. }) => EXIT_INVARIANT,
        RunError::Io { .. } | RunError::Sim(SimError::Io(_)) => EXIT_IO,
        RunError::Sim(_) | RunError::Scenario(_) => EXIT_RUNTIME,
    }
}

/// Splits `--key=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let in_run = args.get(1).is_some_and(|a| a == "run");
    for (i, a) in args.into_iter().enumerate() {
        let is_override = in_run
            && i > 1
            && a.starts_with("--")
            && a.split_once('=').is_some_and(|(k, _)| !matches!(k, "--jobs" | "--check" | "--trace"));
        if is_override {
            overrides.push(a.trim_start_matches("--").to_string());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn run(config: &Path, overrides: &[String], check: bool, trace: bool, jobs: usize) -> Result<(), RunError> {
    let mut cfg = ScenarioConfig::load(config)?;
    cfg.apply_overrides(overrides)?;
    if trace {
        cfg.run.trace = true;
    }
    cfg.validate()?;
    if check {
        println!("config ok: {} scenario, {} run(s)", cfg.run.scenario.as_str(), cfg.run.seeds.len() * cfg.run.overlay_sizes.len());
        return Ok(());
    }
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
    let label = cfg.label();
    let combos: Vec<(usize, u64)> =
        cfg.run.overlay_sizes.iter().flat_map(|&n| cfg.run.seeds.iter().map(move |&s| (n, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Scenario(e.to_string()))?;
    let results: Vec<Result<RunOutput, RunError>> = pool.install(|| {
        combos
            .par_iter()
            .map(|&(n, seed)| {
                let stem = run_file_stem(&label, n, seed);
                let sink: Option<Box<dyn Write + Send>> = if cfg.run.trace {
                    let path = dir.join(format!("{stem}.trace.tsv"));
                    let f = File::create(&path).map_err(|source| RunError::Io { path, source })?;
                    Some(Box::new(BufWriter::new(f)))
                } else {
                    None
                };
                let out = run_one(&cfg, n, seed, sink)?;
                write_csv(&dir.join(format!("{stem}.csv")), &out.rows)?;
                Ok(out)
            })
            .collect()
    });
    let mut done = Vec::new();
    let mut first_err = None;
    for (r, (n, seed)) in results.into_iter().zip(&combos) {
        match r {
            Ok(out) => {
                println!("{label} n={n} seed={seed}: {} rows{}", out.rows.len(), out.trace_hash.as_ref().map(|h| format!(", trace {}", &h[..16])).unwrap_or_default());
                done.push(out);
            }
            Err(e) => {
                eprintln!("{label} n={n} seed={seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let summary = Summary::build(&cfg, &done);
    let path = dir.join(format!("{label}-summary.json"));
    summary.write(&path)?;
    println!("summary: {}", path.display());
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn compare_cmd(a: &Path, b: &Path, out: &Path) -> Result<(), RunError> {
    let (sa, sb) = (Summary::load(a)?, Summary::load(b)?);
    let diff = compare(&sa, &sb);
    println!("{:<32} {:<12} {:>14} {:>14} {:>14} {:>10}", "metric", "statistic", "a", "b", "delta", "ratio");
    for d in &diff.deltas {
        let ratio = d.ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<32} {:<12} {:>14.6} {:>14.6} {:>14.6} {:>10}", d.metric, d.statistic, d.a, d.b, d.delta, ratio);
    }
    for m in &diff.only_in_a {
        println!("only in {}: {m}", a.display());
    }
    for m in &diff.only_in_b {
        println!("only in {}: {m}", b.display());
    }
    let text = serde_json::to_string_pretty(&diff).expect("diff serializes");
    std::fs::write(out, text + "\n").map_err(|source| RunError::Io { path: out.into(), source })
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let result = match cli.command {
        Command::Run { config, check, trace, jobs } => run(&config, &overrides, check, trace, jobs),
        Command::Compare { a, b, out } => compare_cmd(&a, &b, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
