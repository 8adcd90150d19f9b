//! Grid sweeps over config keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::ExperimentConfig;
use super::runner::run_experiment;
use crate::error::{Error, Result};
use crate::metrics::RunReport;

pub const CSV_HEADER: &str = "N,K,accuracy,latency,diversity,relevance";

/// One swept key with its values, parsed from `KEY=v1,v2,...`. `N` and `K`
/// stand for `shots` and `chunking.k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepParam {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep parameter {s:?} is not KEY=v1,v2,...")))?;
        let key = match key.trim() {
            "N" => "shots",
            "K" => "chunking.k",
            k => k,
        };
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if key.is_empty() || values.iter().any(String::is_empty) {
            return Err(Error::Config(format!(
                "sweep parameter {s:?} has an empty key or value"
            )));
        }
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }
}

/// Cartesian product of the parameter values, first parameter slowest.
pub fn grid(params: &[SweepParam]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for p in params {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                p.values.iter().map(move |v| {
                    let mut c: Vec<(String, String)> = cell.clone();
                    c.push((p.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn cell_name(cell: &[(String, String)]) -> String {
    let mut name = String::from("report");
    for (k, v) in cell {
        let short = match k.as_str() {
            "shots" => "N",
            "chunking.k" => "K",
            other => other,
        };
        name.push('_');
        name.extend(format!("{short}{v}").chars().map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '-'
            }
        }));
    }
    name + ".json"
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(report: &RunReport) -> String {
    let a = &report.aggregates;
    format!(
        "{},{},{},{},{},{}",
        report.shots,
        report.k,
        opt(a.accuracy.accuracy),
        opt(a.mean_latency),
        opt(a.mean_diversity),
        opt(a.mean_relevance)
    )
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub reports: Vec<PathBuf>,
    pub csv: PathBuf,
    /// Cells that could not run, with the reason.
    pub failed_cells: Vec<(String, Error)>,
    /// Cells that ran but had failing queries.
    pub partial_cells: usize,
}

/// Runs every cell, writing one report per cell and `sweep.csv` into `out_dir`.
pub fn run_sweep(
    config: &Path,
    overrides: &[(String, String)],
    params: &[SweepParam],
    out_dir: &Path,
) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut outcome = SweepOutcome {
        reports: Vec::new(),
        csv: out_dir.join("sweep.csv"),
        failed_cells: Vec::new(),
        partial_cells: 0,
    };
    for cell in grid(params) {
        let name = cell_name(&cell);
        let mut all = overrides.to_vec();
        all.extend(cell.iter().cloned());
        let report = ExperimentConfig::load(config, &all).and_then(|cfg| run_experiment(&cfg));
        match report {
            Ok(report) => {
                let path = out_dir.join(&name);
                std::fs::write(&path, report.to_json_pretty())?;
                writeln!(csv, "{}", csv_row(&report)).expect("string write");
                outcome.partial_cells += usize::from(report.failed() > 0);
                outcome.reports.push(path);
            }
            Err(e) if e.is_protocol() => return Err(e),
            Err(e) => outcome.failed_cells.push((name, e)),
        }
    }
    std::fs::write(&outcome.csv, csv)?;
    Ok(outcome)
}
