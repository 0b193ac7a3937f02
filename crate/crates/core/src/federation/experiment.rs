use serde::{Deserialize, Serialize};

use super::round::{Federation, RoundReport};
use super::FedConfig;
use crate::error::Result;
use crate::taskgen::{ClientDataset, World};

/// Stops once the monitored loss fails to improve on its best value for
/// `patience` consecutive observations. `patience = 0` never stops.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one observation; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxRounds,
    Patience,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub stop_reason: StopReason,
    pub threshold: f64,
    /// First round whose validation loss is at or below `threshold`.
    pub rounds_to_threshold: Option<usize>,
    /// Σ per-round cost multiplier `1 + cost_per_round` over the first
    /// `rounds_to_threshold` rounds.
    pub cost_to_threshold: Option<f64>,
    /// Σ per-round cost multiplier over every executed round.
    pub total_cost: f64,
    pub final_val_loss: f64,
    /// Final global model on every held-out client.
    pub final_zeroshot_loss: f64,
}

impl ExperimentResult {
    pub fn rounds(&self) -> usize {
        self.reports.len()
    }

    /// Mean adapter-to-base parameter ratio over the rounds up to the
    /// threshold (all rounds if it was never reached), or 0 without rounds.
    pub fn mean_cost_per_round(&self) -> f64 {
        let n = self.rounds_to_threshold.unwrap_or(self.reports.len());
        if n == 0 {
            return 0.0;
        }
        self.reports[..n].iter().map(|r| r.cost_per_round).sum::<f64>() / n as f64
    }
}

pub fn run_experiment(world: &World, cfg: &FedConfig) -> Result<ExperimentResult> {
    run_federation(Federation::new(world, cfg.clone())?)
}

/// Same as [`run_experiment`] with pre-generated client datasets.
pub fn run_experiment_with(
    world: &World,
    cfg: &FedConfig,
    datasets: Vec<ClientDataset>,
) -> Result<ExperimentResult> {
    run_federation(Federation::with_datasets(world, cfg.clone(), datasets)?)
}

pub fn run_federation(mut fed: Federation<'_>) -> Result<ExperimentResult> {
    let cfg = fed.config().clone();
    let threshold = fed.loss_threshold()?;
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut reports = Vec::with_capacity(cfg.max_rounds);
    let mut stop_reason = StopReason::MaxRounds;
    let mut rounds_to_threshold = None;
    let mut cost = 0.0;
    let mut cost_to_threshold = None;
    for _ in 0..cfg.max_rounds {
        let report = fed.run_round()?;
        cost += 1.0 + report.cost_per_round;
        if rounds_to_threshold.is_none() && report.val_loss <= threshold {
            rounds_to_threshold = Some(report.round);
            cost_to_threshold = Some(cost);
        }
        let stop = stopper.observe(report.val_loss);
        reports.push(report);
        if stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    Ok(ExperimentResult {
        reports,
        stop_reason,
        threshold,
        rounds_to_threshold,
        cost_to_threshold,
        total_cost: cost,
        final_val_loss: fed.validation_loss()?,
        final_zeroshot_loss: fed.heldout_zeroshot_loss()?,
    })
}
