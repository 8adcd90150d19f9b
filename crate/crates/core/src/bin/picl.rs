use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use parallel_icl::harness::{
    generate_synthetic, parse_override, run_experiment, run_sweep, save_dataset, ExperimentConfig, SweepParam,
    SyntheticSuiteSpec,
};
use parallel_icl::metrics::{speedup_and_ratio, RunReport, SCHEMA_VERSION};
use parallel_icl::{Error, Result};

const EXIT_CONFIG: u8 = 1;
const EXIT_BACKEND: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "picl", version, about = "Chunk-parallel in-context learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` with a dotted key, e.g. `chunking.k=4`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Report path; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a run against a baseline run.
    Compare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value = "comparison.json")]
        out: PathBuf,
    },
    /// Write a synthetic dataset (dataset.jsonl) and its model (model.json).
    GenSynthetic {
        /// Suite spec in TOML.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of experiments.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `KEY=v1,v2,...`; `N` and `K` abbreviate `shots` and `chunking.k`.
        #[arg(long = "param", value_name = "KEY=VALUES", required = true)]
        params: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_backend() {
        EXIT_BACKEND
    } else {
        EXIT_CONFIG
    }
}

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|o| parse_override(o).map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

fn run(config: &Path, raw: &[String], out: Option<PathBuf>) -> Result<u8> {
    let cfg = ExperimentConfig::load(config, &overrides(raw)?)?;
    let report = run_experiment(&cfg)?;
    let path = out.unwrap_or_else(|| cfg.output.clone());
    write(&path, &report.to_json_pretty())?;
    let a = &report.aggregates;
    println!(
        "{}: N={} K={} accuracy={} latency={} diversity={} relevance={} failed={} -> {}",
        report.name,
        report.shots,
        report.k,
        fmt_opt(a.accuracy.accuracy, 4),
        fmt_opt(a.mean_latency, 4),
        fmt_opt(a.mean_diversity, 4),
        fmt_opt(a.mean_relevance, 4),
        a.failed,
        path.display()
    );
    Ok(if report.failed() > 0 { EXIT_PARTIAL } else { 0 })
}

fn read_report(path: &Path) -> Result<RunReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunReport::from_json(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn compare(run: &Path, baseline: &Path, out: &Path) -> Result<u8> {
    let (r, b) = (read_report(run)?, read_report(baseline)?);
    let c = speedup_and_ratio(&r, &b).map_err(|e| Error::Config(e.to_string()))?;
    println!("{:<24} {:>10} {:>10} {:>10}", "run", "latency", "accuracy", "speedup");
    println!(
        "{:<24} {:>10} {:>10} {:>10}",
        b.name,
        fmt_opt(b.aggregates.mean_latency, 3),
        fmt_opt(b.aggregates.accuracy.accuracy, 4),
        "1.000x"
    );
    println!(
        "{:<24} {:>10} {:>10} {:>9.3}x",
        r.name,
        fmt_opt(r.aggregates.mean_latency, 3),
        fmt_opt(r.aggregates.accuracy.accuracy, 4),
        c.speedup
    );
    println!("approx ratio: {:.1}%", c.approx_ratio * 100.0);
    let merged = json!({
        "schema_version": SCHEMA_VERSION,
        "comparison": c,
        "run": r,
        "baseline": b,
    });
    write(out, &serde_json::to_vec_pretty(&merged)?)?;
    Ok(0)
}

fn gen_synthetic(spec: &Path, out: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let spec: SyntheticSuiteSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let suite = generate_synthetic(&spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    save_dataset(&suite.dataset, &out.join("dataset.jsonl"))?;
    write(&out.join("model.json"), &serde_json::to_vec_pretty(&suite.model)?)?;
    println!(
        "{} demonstrations, {} queries -> {}",
        suite.dataset.demonstrations.len(),
        suite.dataset.queries.len(),
        out.display()
    );
    Ok(0)
}

fn sweep(config: &Path, params: &[String], raw: &[String], out: &Path) -> Result<u8> {
    let params = params.iter().map(|p| p.parse()).collect::<Result<Vec<SweepParam>>>()?;
    let outcome = run_sweep(config, &overrides(raw)?, &params, out)?;
    for (cell, e) in &outcome.failed_cells {
        eprintln!("{cell}: {e}");
    }
    println!(
        "{} reports, {} failed cells -> {}",
        outcome.reports.len(),
        outcome.failed_cells.len(),
        outcome.csv.display()
    );
    if let Some((_, e)) = outcome.failed_cells.first() {
        if outcome.reports.is_empty() {
            return Ok(exit_code(e));
        }
    }
    let partial = !outcome.failed_cells.is_empty() || outcome.partial_cells > 0;
    Ok(if partial { EXIT_PARTIAL } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides, out } => run(&config, &overrides, out),
        Command::Compare { run, baseline, out } => compare(&run, &baseline, &out),
        Command::GenSynthetic { spec, out } => gen_synthetic(&spec, &out),
        Command::Sweep {
            config,
            params,
            overrides,
            out,
        } => sweep(&config, &params, &overrides, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
