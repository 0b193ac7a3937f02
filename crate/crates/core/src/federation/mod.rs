//! Federated rounds over a synthetic world: resource assignment, client
//! sampling, local training, aggregation and evaluation.

mod experiment;
mod resources;
mod round;
mod scaling;

pub use experiment::{
    run_experiment, run_experiment_with, run_federation, EarlyStopping, ExperimentResult, StopReason,
};
pub use resources::{
    assign_resources, ClientProfile, ConfigType, RankPalette, ResourceDistribution,
};
pub use round::{Federation, GlobalModel, PhiRecord, RoundReport};
pub use scaling::{client_scaling_experiment, fit_scaling_law, ScalingFit, ScalingResult};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OptimizerConfig, OptimizerKind};
use crate::taskgen::parse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Factor-wise averaging of `B` and `A` (homogeneous ranks only).
    Naive,
    /// Full-delta averaging with SVD redistribution.
    FlexLora,
    /// Zero-padded factor averaging with leading-slice distribution.
    HetLora,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::FlexLora => "flexlora",
            Strategy::HetLora => "hetlora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" | "fedavg" => Ok(Strategy::Naive),
            "flexlora" | "flex" => Ok(Strategy::FlexLora),
            "hetlora" | "het" => Ok(Strategy::HetLora),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub strategy: Strategy,
    pub distribution: ResourceDistribution,
    pub palette: RankPalette,
    pub participation_rate: f64,
    /// Overrides `participation_rate` with a fixed count per round.
    pub participants_per_round: Option<usize>,
    pub max_rounds: usize,
    /// Rounds without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Validation loss target for rounds-to-threshold; `None` derives it
    /// from `threshold_progress`.
    pub loss_threshold: Option<f64>,
    /// Fraction of the gap between the untuned base model's validation loss
    /// and the averaged-teacher reference loss that the automatic threshold
    /// sits at.
    pub threshold_progress: f64,
    /// Clients never eligible for training; the final zero-shot evaluation
    /// runs on all of them.
    pub heldout_clients: usize,
    /// Size of the per-round zero-shot pool.
    pub zeroshot_pool: usize,
    /// Restricts training to this many clients (seeded choice among the
    /// non-held-out ones).
    pub train_pool: Option<usize>,
    pub optimizer: OptimizerConfig,
    /// Linear learning-rate decay to zero across `max_rounds`.
    pub linear_decay: bool,
    pub scaling: f64,
    pub hetlora_l2: f64,
    pub hetlora_prune: bool,
    pub hetlora_decay: f64,
    /// Evaluate unseen clients on a deployment truncated to their own rank
    /// budget instead of the full global delta.
    pub budgeted_zeroshot: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FlexLora,
            distribution: ResourceDistribution::uniform(),
            palette: RankPalette::toy(2),
            participation_rate: 0.05,
            participants_per_round: None,
            max_rounds: 200,
            early_stop_patience: 3,
            loss_threshold: None,
            threshold_progress: 0.75,
            heldout_clients: 40,
            zeroshot_pool: 20,
            train_pool: None,
            optimizer: OptimizerConfig {
                epochs: 5,
                ..OptimizerConfig::sgd(0.01)
            },
            linear_decay: false,
            scaling: 1.0,
            hetlora_l2: 5e-4,
            hetlora_prune: false,
            hetlora_decay: 0.99,
            budgeted_zeroshot: false,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return bad(format!(
                "participation_rate {} must be in (0, 1]",
                self.participation_rate
            ));
        }
        if self.participants_per_round == Some(0) {
            return bad("participants_per_round must be positive".into());
        }
        if !(self.scaling > 0.0 && self.scaling.is_finite()) {
            return bad(format!("scaling {} must be positive", self.scaling));
        }
        if self.zeroshot_pool > self.heldout_clients {
            return bad(format!(
                "zeroshot_pool {} exceeds heldout_clients {}",
                self.zeroshot_pool, self.heldout_clients
            ));
        }
        if !(self.threshold_progress > 0.0 && self.threshold_progress <= 1.0) {
            return bad(format!(
                "threshold_progress {} must be in (0, 1]",
                self.threshold_progress
            ));
        }
        if !(self.hetlora_decay > 0.0 && self.hetlora_decay <= 1.0) {
            return Err(Error::InvalidDecay(self.hetlora_decay));
        }
        if !(self.hetlora_l2 >= 0.0) {
            return bad("hetlora_l2 must be >= 0".into());
        }
        self.distribution.validate()?;
        self.optimizer.validate()
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.kind
    }

    /// Canonical `key=value` listing (stable order).
    pub fn entries(&self) -> Vec<(String, String)> {
        let opt = &self.optimizer;
        let kind = match opt.kind {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let opt_usize = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        vec![
            ("strategy".into(), self.strategy.as_str().into()),
            ("distribution".into(), self.distribution.to_spec()),
            ("palette".into(), self.palette.to_spec()),
            ("participation_rate".into(), self.participation_rate.to_string()),
            ("participants_per_round".into(), opt_usize(self.participants_per_round)),
            ("max_rounds".into(), self.max_rounds.to_string()),
            ("early_stop_patience".into(), self.early_stop_patience.to_string()),
            (
                "loss_threshold".into(),
                self.loss_threshold.map_or("auto".into(), |t| t.to_string()),
            ),
            ("threshold_progress".into(), self.threshold_progress.to_string()),
            ("heldout_clients".into(), self.heldout_clients.to_string()),
            ("zeroshot_pool".into(), self.zeroshot_pool.to_string()),
            ("train_pool".into(), opt_usize(self.train_pool)),
            ("optimizer".into(), kind.into()),
            ("learning_rate".into(), opt.learning_rate.to_string()),
            ("epochs".into(), opt.epochs.to_string()),
            ("batch_size".into(), opt.batch_size.to_string()),
            ("l2_adapter_penalty".into(), opt.l2_adapter_penalty.to_string()),
            ("linear_decay".into(), self.linear_decay.to_string()),
            ("scaling".into(), self.scaling.to_string()),
            ("hetlora_l2".into(), self.hetlora_l2.to_string()),
            ("hetlora_prune".into(), self.hetlora_prune.to_string()),
            ("hetlora_decay".into(), self.hetlora_decay.to_string()),
            ("budgeted_zeroshot".into(), self.budgeted_zeroshot.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt_usize = |v: &str| -> Result<Option<usize>> {
            if v == "none" {
                Ok(None)
            } else {
                parse(key, v).map(Some)
            }
        };
        match key {
            "strategy" => self.strategy = Strategy::parse(value)?,
            "distribution" => self.distribution = ResourceDistribution::parse(value)?,
            "palette" => self.palette = RankPalette::parse(value)?,
            "participation_rate" => self.participation_rate = parse(key, value)?,
            "participants_per_round" => self.participants_per_round = opt_usize(value)?,
            "max_rounds" => self.max_rounds = parse(key, value)?,
            "early_stop_patience" | "patience" => self.early_stop_patience = parse(key, value)?,
            "loss_threshold" => {
                self.loss_threshold = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "threshold_progress" => self.threshold_progress = parse(key, value)?,
            "heldout_clients" => self.heldout_clients = parse(key, value)?,
            "zeroshot_pool" => self.zeroshot_pool = parse(key, value)?,
            "train_pool" => self.train_pool = opt_usize(value)?,
            "optimizer" => {
                self.optimizer.kind = match value {
                    "sgd" | "fedavg" => OptimizerKind::Sgd,
                    "adam" | "fedit" => OptimizerKind::Adam,
                    other => {
                        return Err(Error::InvalidConfig(format!("unknown optimizer {other:?}")))
                    }
                }
            }
            "learning_rate" | "lr" => self.optimizer.learning_rate = parse(key, value)?,
            "epochs" => self.optimizer.epochs = parse(key, value)?,
            "batch_size" => self.optimizer.batch_size = parse(key, value)?,
            "l2_adapter_penalty" => self.optimizer.l2_adapter_penalty = parse(key, value)?,
            "linear_decay" => self.linear_decay = parse(key, value)?,
            "scaling" => self.scaling = parse(key, value)?,
            "hetlora_l2" => self.hetlora_l2 = parse(key, value)?,
            "hetlora_prune" => self.hetlora_prune = parse(key, value)?,
            "hetlora_decay" => self.hetlora_decay = parse(key, value)?,
            "budgeted_zeroshot" => self.budgeted_zeroshot = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown fed key {other:?}"))),
        }
        Ok(())
    }
}
