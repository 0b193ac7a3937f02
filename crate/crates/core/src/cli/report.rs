//! CSV and JSON artifacts.
//!
//! Every CSV starts with a comment row `# config_hash=<hex> seeds=<list>`
//! followed by a header row. Column order is fixed:
//!
//! - `rounds.csv`: `round,strategy,distribution,seed,train_loss,val_loss,zeroshot_loss,cost_per_round`
//! - `spectra.csv`: `round,layer,index,sigma,error_ratio,strategy,distribution,seed`
//! - `phi.csv`: `round,client_id,config_type,layer,rank,phi,tail_formula,delta_norm,strategy,distribution,seed`
//! - sweep `summary.csv`: see [`SUMMARY_COLUMNS`]

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ExperimentResult, StopReason};

pub const ROUNDS_COLUMNS: [&str; 8] = [
    "round",
    "strategy",
    "distribution",
    "seed",
    "train_loss",
    "val_loss",
    "zeroshot_loss",
    "cost_per_round",
];

pub const SPECTRA_COLUMNS: [&str; 8] = [
    "round",
    "layer",
    "index",
    "sigma",
    "error_ratio",
    "strategy",
    "distribution",
    "seed",
];

pub const PHI_COLUMNS: [&str; 11] = [
    "round",
    "client_id",
    "config_type",
    "layer",
    "rank",
    "phi",
    "tail_formula",
    "delta_norm",
    "strategy",
    "distribution",
    "seed",
];

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "cell",
    "strategy",
    "distribution",
    "seeds",
    "final_zeroshot_mean",
    "final_zeroshot_std",
    "final_val_mean",
    "reached",
    "rounds_to_threshold",
    "cost_per_round",
    "cost_multiplier",
    "cost_all",
    "cost_all_pct",
];

/// One replicate's headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub rounds: usize,
    pub stop_reason: StopReason,
    pub threshold: f64,
    pub rounds_to_threshold: Option<usize>,
    pub cost_per_round: f64,
    pub cost_to_threshold: Option<f64>,
    pub total_cost: f64,
    pub final_val_loss: f64,
    pub final_zeroshot_loss: f64,
}

impl SeedSummary {
    pub fn new(seed: u64, r: &ExperimentResult) -> Self {
        Self {
            seed,
            rounds: r.rounds(),
            stop_reason: r.stop_reason,
            threshold: r.threshold,
            rounds_to_threshold: r.rounds_to_threshold,
            cost_per_round: r.mean_cost_per_round(),
            cost_to_threshold: r.cost_to_threshold,
            total_cost: r.total_cost,
            final_val_loss: r.final_val_loss,
            final_zeroshot_loss: r.final_zeroshot_loss,
        }
    }
}

/// Aggregate over the replicates of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub strategy: String,
    pub distribution: String,
    pub config_hash: String,
    pub runs: Vec<SeedSummary>,
    pub final_zeroshot_mean: f64,
    pub final_zeroshot_std: f64,
    pub final_val_mean: f64,
    /// Replicates whose validation loss reached the threshold.
    pub reached: usize,
    /// `R`: mean rounds to threshold over the replicates that reached it.
    pub rounds_to_threshold: Option<f64>,
    /// Mean adapter-to-base parameter ratio per round.
    pub cost_per_round: f64,
    /// `Cost_R`: `1 + cost_per_round`.
    pub cost_multiplier: f64,
    /// `Cost_all`: mean cumulative multiplier up to the threshold, over the
    /// replicates that reached it.
    pub cost_all: Option<f64>,
    /// `Cost_all` relative to a baseline cell, in percent.
    pub cost_all_pct: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl CellSummary {
    pub fn new(cell: &str, strategy: &str, distribution: &str, config_hash: &str, runs: Vec<SeedSummary>) -> Self {
        let zs: Vec<f64> = runs.iter().map(|r| r.final_zeroshot_loss).collect();
        let val: Vec<f64> = runs.iter().map(|r| r.final_val_loss).collect();
        let reached: Vec<&SeedSummary> = runs.iter().filter(|r| r.rounds_to_threshold.is_some()).collect();
        let rtt: Vec<f64> = reached
            .iter()
            .filter_map(|r| r.rounds_to_threshold.map(|x| x as f64))
            .collect();
        let cost_all: Vec<f64> = reached.iter().filter_map(|r| r.cost_to_threshold).collect();
        let cost_per_round = mean(&runs.iter().map(|r| r.cost_per_round).collect::<Vec<_>>());
        Self {
            cell: cell.to_string(),
            strategy: strategy.to_string(),
            distribution: distribution.to_string(),
            config_hash: config_hash.to_string(),
            final_zeroshot_mean: mean(&zs),
            final_zeroshot_std: std(&zs),
            final_val_mean: mean(&val),
            reached: reached.len(),
            rounds_to_threshold: (!rtt.is_empty()).then(|| mean(&rtt)),
            cost_per_round,
            cost_multiplier: 1.0 + cost_per_round,
            cost_all: (!cost_all.is_empty()).then(|| mean(&cost_all)),
            cost_all_pct: None,
            runs,
        }
    }
}

pub fn header_comment(config_hash: &str, seeds: &str) -> String {
    format!("# config_hash={config_hash} seeds={seeds}\n")
}

fn csv_bytes<F>(comment: &str, columns: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = comment.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(columns).map_err(io_err)?;
        fill(&mut w).map_err(io_err)?;
        w.flush().map_err(|e| Error::Io(e.to_string()))?;
    }
    Ok(buf)
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// One replicate of one configuration, as written to the CSVs.
pub struct RunRecord<'a> {
    pub strategy: &'a str,
    pub distribution: &'a str,
    pub seed: u64,
    pub result: &'a ExperimentResult,
}

pub fn rounds_csv(comment: &str, runs: &[RunRecord<'_>]) -> Result<Vec<u8>> {
    csv_bytes(comment, &ROUNDS_COLUMNS, |w| {
        for run in runs {
            for r in &run.result.reports {
                w.write_record([
                    r.round.to_string(),
                    run.strategy.to_string(),
                    run.distribution.to_string(),
                    run.seed.to_string(),
                    r.train_loss.to_string(),
                    r.val_loss.to_string(),
                    r.zeroshot_loss.to_string(),
                    r.cost_per_round.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn spectra_csv(comment: &str, runs: &[RunRecord<'_>]) -> Result<Vec<u8>> {
    csv_bytes(comment, &SPECTRA_COLUMNS, |w| {
        for run in runs {
            for r in &run.result.reports {
                for (layer, (sigma, ratios)) in r.spectra.iter().zip(&r.error_ratios).enumerate() {
                    for (i, (s, e)) in sigma.iter().zip(ratios).enumerate() {
                        w.write_record([
                            r.round.to_string(),
                            layer.to_string(),
                            (i + 1).to_string(),
                            s.to_string(),
                            e.to_string(),
                            run.strategy.to_string(),
                            run.distribution.to_string(),
                            run.seed.to_string(),
                        ])?;
                    }
                }
            }
        }
        Ok(())
    })
}

pub fn phi_csv(comment: &str, runs: &[RunRecord<'_>]) -> Result<Vec<u8>> {
    csv_bytes(comment, &PHI_COLUMNS, |w| {
        for run in runs {
            for r in &run.result.reports {
                for p in &r.phi {
                    w.write_record([
                        r.round.to_string(),
                        p.client_id.to_string(),
                        p.config_type.to_string(),
                        p.layer.to_string(),
                        p.rank.to_string(),
                        p.measured.to_string(),
                        p.tail_formula.to_string(),
                        p.delta_norm.to_string(),
                        run.strategy.to_string(),
                        run.distribution.to_string(),
                        run.seed.to_string(),
                    ])?;
                }
            }
        }
        Ok(())
    })
}

pub fn summary_csv(comment: &str, cells: &[CellSummary]) -> Result<Vec<u8>> {
    csv_bytes(comment, &SUMMARY_COLUMNS, |w| {
        for c in cells {
            let seeds = c.runs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                c.cell.clone(),
                c.strategy.clone(),
                c.distribution.clone(),
                seeds,
                c.final_zeroshot_mean.to_string(),
                c.final_zeroshot_std.to_string(),
                c.final_val_mean.to_string(),
                c.reached.to_string(),
                opt(c.rounds_to_threshold),
                c.cost_per_round.to_string(),
                c.cost_multiplier.to_string(),
                opt(c.cost_all),
                opt(c.cost_all_pct),
            ])?;
        }
        Ok(())
    })
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}
