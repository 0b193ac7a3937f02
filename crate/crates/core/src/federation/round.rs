use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::resources::{assign_resources, ClientProfile, ConfigType};
use super::{FedConfig, Strategy};
use crate::adapter::{compose, LayerShape, LoraAdapter};
use crate::aggregate::{
    aggregate_flexlora, aggregate_hetlora, aggregate_naive, hetlora_distribute, hetlora_prune,
    ClientId, Contribution, FactorizedDelta,
};
use crate::error::{Error, Result};
use crate::lowrank::{error_ratio_curve, frobenius_norm, svd, weighted_sum, Matrix, SvdFactors};
use crate::model::{forward_weights, local_update, mse_of, Batch, OptimizerConfig};
use crate::seed;
use crate::taskgen::{unseen_pool, ClientDataset, World};

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub enum GlobalModel {
    /// Before the first aggregation: `B = 0` and a shared Gaussian `A`
    /// (standard normal, `max_rank x in`) per layer; a rank-`r` client gets
    /// the first `r` rows scaled by `1/sqrt(r)`.
    Initial { downs: Vec<Matrix> },
    /// FlexLoRA: full global delta plus its per-layer SVD.
    Delta(FactorizedDelta),
    /// Naive / HETLORA: global factor pair per layer.
    Factors(Vec<LoraAdapter>),
}

/// Redistribution error of one participant on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiRecord {
    pub client_id: ClientId,
    pub config_type: ConfigType,
    pub layer: usize,
    pub rank: usize,
    /// `‖compose(received) − W_g‖_F`, measured directly.
    pub measured: f64,
    /// `sqrt(Σ_{j>r} σ_j²)` of the global delta.
    pub tail_formula: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<ClientId>,
    /// Mean final local training loss over participants.
    pub train_loss: f64,
    /// Global model on the validation splits of all training clients.
    pub val_loss: f64,
    /// Global model on a fresh pool of never-trained clients.
    pub zeroshot_loss: f64,
    pub zeroshot_pool: Vec<ClientId>,
    /// Singular values of the aggregated global delta, per layer.
    pub spectra: Vec<Vec<f64>>,
    /// `truncation_error(r) / ‖W_g‖_F` for `r = 1..=k`, per layer.
    pub error_ratios: Vec<Vec<f64>>,
    /// FlexLoRA only: redistribution errors of this round's participants.
    pub phi: Vec<PhiRecord>,
    /// Mean over participants of adapter params / base params.
    pub cost_per_round: f64,
}

pub struct Federation<'w> {
    world: &'w World,
    cfg: FedConfig,
    shapes: Vec<LayerShape>,
    datasets: Vec<ClientDataset>,
    profiles: Vec<ClientProfile>,
    candidates: Vec<ClientId>,
    heldout: Vec<ClientId>,
    trained: BTreeSet<ClientId>,
    val_set: Batch,
    global: GlobalModel,
    round: usize,
    last_contributions: Vec<Contribution>,
}

impl<'w> Federation<'w> {
    pub fn new(world: &'w World, cfg: FedConfig) -> Result<Self> {
        let datasets = world.all_datasets()?;
        Self::with_datasets(world, cfg, datasets)
    }

    /// Reuses pre-generated datasets (one per world client, in id order).
    pub fn with_datasets(world: &'w World, cfg: FedConfig, datasets: Vec<ClientDataset>) -> Result<Self> {
        cfg.validate()?;
        let shapes = world.base.shapes();
        cfg.palette.validate(&shapes)?;
        if datasets.len() != world.clients.len() {
            return Err(Error::InvalidConfig("one dataset per client required".into()));
        }
        let n = world.clients.len();
        if cfg.heldout_clients >= n {
            return Err(Error::InvalidConfig(format!(
                "heldout_clients {} leaves no training clients out of {n}",
                cfg.heldout_clients
            )));
        }
        let profiles = assign_resources(
            &cfg.distribution,
            &world.clients,
            &cfg.palette,
            cfg.optimizer_kind(),
            cfg.seed,
        )?;

        let mut order: Vec<ClientId> = world.clients.iter().map(|c| c.id).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::TAG_HOLDOUT]));
        let mut heldout: Vec<ClientId> = order[..cfg.heldout_clients].to_vec();
        let rest = &order[cfg.heldout_clients..];
        let pool = match cfg.train_pool {
            Some(p) if p == 0 || p > rest.len() => {
                return Err(Error::InvalidConfig(format!(
                    "train_pool {p} must be in 1..={}",
                    rest.len()
                )))
            }
            Some(p) => p,
            None => rest.len(),
        };
        let mut candidates: Vec<ClientId> = rest[..pool].to_vec();
        heldout.sort();
        candidates.sort();

        let val_parts: Vec<&Batch> = candidates.iter().map(|id| &datasets[id.0 as usize].val).collect();
        let val_set = Batch::concat(&val_parts)?;

        let max_ranks = cfg.palette.max_ranks();
        let mut rng = seed::rng(cfg.seed, &[seed::TAG_INIT]);
        let downs = shapes
            .iter()
            .zip(&max_ranks)
            .map(|(s, &r)| Matrix::gaussian(r, s.in_dim, 1.0, &mut rng))
            .collect();

        Ok(Self {
            world,
            cfg,
            shapes,
            datasets,
            profiles,
            candidates,
            heldout,
            trained: BTreeSet::new(),
            val_set,
            global: GlobalModel::Initial { downs },
            round: 0,
            last_contributions: Vec::new(),
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        self.world
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn profile(&self, id: ClientId) -> &ClientProfile {
        &self.profiles[id.0 as usize]
    }

    pub fn candidates(&self) -> &[ClientId] {
        &self.candidates
    }

    pub fn heldout(&self) -> &[ClientId] {
        &self.heldout
    }

    pub fn trained(&self) -> &BTreeSet<ClientId> {
        &self.trained
    }

    pub fn global(&self) -> &GlobalModel {
        &self.global
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn dataset(&self, id: ClientId) -> &ClientDataset {
        &self.datasets[id.0 as usize]
    }

    /// Contributions aggregated in the most recent round, in participant
    /// order.
    pub fn last_contributions(&self) -> &[Contribution] {
        &self.last_contributions
    }

    pub fn participants_per_round(&self) -> usize {
        let m = self.cfg.participants_per_round.unwrap_or_else(|| {
            (self.cfg.participation_rate * self.candidates.len() as f64).ceil() as usize
        });
        m.clamp(1, self.candidates.len())
    }

    /// Participants of `round`, ascending by id; depends only on the seed,
    /// the round index and the candidate set.
    pub fn sample_participants(&self, round: usize) -> Vec<ClientId> {
        let mut rng = seed::rng(self.cfg.seed, &[seed::TAG_SAMPLING, round as u64]);
        let m = self.participants_per_round();
        let mut out: Vec<ClientId> = index::sample(&mut rng, self.candidates.len(), m)
            .into_iter()
            .map(|i| self.candidates[i])
            .collect();
        out.sort();
        out
    }

    /// Adapters a client with `ranks` receives from the current global state.
    pub fn distribute(&self, ranks: &[usize]) -> Result<Vec<LoraAdapter>> {
        let s = self.cfg.scaling;
        match &self.global {
            GlobalModel::Initial { downs } => self
                .shapes
                .iter()
                .zip(downs)
                .zip(ranks)
                .map(|((shape, down), &r)| {
                    shape.check_rank(r)?;
                    let a = down.first_rows(r).map(|x| x / (r as f64).sqrt());
                    LoraAdapter::new(Matrix::zeros(shape.out_dim, r), a, s)
                })
                .collect(),
            GlobalModel::Delta(fd) => fd.adapters_for(ranks, s),
            GlobalModel::Factors(global) => match self.cfg.strategy {
                Strategy::HetLora => hetlora_distribute(global, ranks),
                _ => Ok(global.clone()),
            },
        }
    }

    /// Per-layer global delta.
    pub fn global_delta(&self) -> Vec<Matrix> {
        match &self.global {
            GlobalModel::Initial { .. } => self
                .shapes
                .iter()
                .map(|s| Matrix::zeros(s.out_dim, s.in_dim))
                .collect(),
            GlobalModel::Delta(fd) => fd.delta.layers.clone(),
            GlobalModel::Factors(global) => global.iter().map(compose).collect(),
        }
    }

    fn weights_with(&self, deltas: &[Matrix]) -> Vec<Matrix> {
        self.world
            .base
            .layers()
            .iter()
            .zip(deltas)
            .map(|(w0, d)| w0.add(d).expect("shapes match"))
            .collect()
    }

    /// `W0 + global delta` per layer.
    pub fn global_weights(&self) -> Vec<Matrix> {
        self.weights_with(&self.global_delta())
    }

    pub fn validation_loss(&self) -> Result<f64> {
        let pred = forward_weights(&self.global_weights(), &self.val_set.inputs)?;
        mse_of(&pred, &self.val_set.targets)
    }

    /// Validation loss of the frozen base model with no adapters.
    pub fn base_validation_loss(&self) -> Result<f64> {
        let pred = forward_weights(self.world.base.layers(), &self.val_set.inputs)?;
        mse_of(&pred, &self.val_set.targets)
    }

    /// Validation loss of the base plus the mean of all archetype teacher
    /// deltas: a reference for what one shared model can reach.
    pub fn reference_validation_loss(&self) -> Result<f64> {
        let t = self.world.teacher_deltas.len() as f64;
        let deltas: Vec<Matrix> = (0..self.shapes.len())
            .map(|l| {
                let parts: Vec<&Matrix> = self.world.teacher_deltas.iter().map(|d| &d[l]).collect();
                weighted_sum(&parts, &vec![1.0 / t; parts.len()])
            })
            .collect::<Result<_>>()?;
        let pred = forward_weights(&self.weights_with(&deltas), &self.val_set.inputs)?;
        mse_of(&pred, &self.val_set.targets)
    }

    /// `cfg.loss_threshold`, or `base − progress·(base − reference)`.
    pub fn loss_threshold(&self) -> Result<f64> {
        match self.cfg.loss_threshold {
            Some(t) => Ok(t),
            None => {
                let base = self.base_validation_loss()?;
                let reference = self.reference_validation_loss()?;
                Ok(base - self.cfg.threshold_progress * (base - reference))
            }
        }
    }

    /// Sample-weighted loss of the global model on every sample of `clients`.
    /// With `budgeted_zeroshot`, each client is evaluated on the deployment
    /// it would receive at its own rank budget.
    pub fn zeroshot_loss(&self, clients: &[ClientId]) -> Result<f64> {
        if clients.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let shared = self.global_weights();
        let parts: Vec<(f64, usize)> = clients
            .par_iter()
            .map(|&id| {
                let ds = &self.datasets[id.0 as usize];
                let all = Batch::concat(&[&ds.train, &ds.val, &ds.test])?;
                let weights = if self.cfg.budgeted_zeroshot {
                    let deltas: Vec<Matrix> = self
                        .distribute(&self.profile(id).ranks)?
                        .iter()
                        .map(compose)
                        .collect();
                    self.weights_with(&deltas)
                } else {
                    shared.clone()
                };
                let pred = forward_weights(&weights, &all.inputs)?;
                Ok((mse_of(&pred, &all.targets)? * all.len() as f64, all.len()))
            })
            .collect::<Result<_>>()?;
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let n: usize = parts.iter().map(|p| p.1).sum();
        Ok(total / n as f64)
    }

    /// Zero-shot loss on the full held-out population.
    pub fn heldout_zeroshot_loss(&self) -> Result<f64> {
        self.zeroshot_loss(&self.heldout)
    }

    fn check_homogeneous(&self) -> Result<()> {
        let first = &self.profile(self.candidates[0]).ranks;
        for &id in &self.candidates[1..] {
            let p = self.profile(id);
            if &p.ranks != first {
                return Err(Error::HeterogeneousRanksUnsupported(format!(
                    "client {id} has ranks {:?} but client {} has {:?}",
                    p.ranks, self.candidates[0], first
                )));
            }
        }
        Ok(())
    }

    fn local_optimizer(&self, round: usize) -> OptimizerConfig {
        let mut opt = self.cfg.optimizer.clone();
        if self.cfg.linear_decay && self.cfg.max_rounds > 0 {
            let frac = (round - 1) as f64 / self.cfg.max_rounds as f64;
            opt.learning_rate *= (1.0 - frac).max(0.0);
        }
        if self.cfg.strategy == Strategy::HetLora {
            opt.l2_adapter_penalty = self.cfg.hetlora_l2;
        }
        opt
    }

    /// One synchronous round: sample, distribute, train locally in
    /// parallel, aggregate, evaluate.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        if self.cfg.strategy == Strategy::Naive {
            self.check_homogeneous()?;
        }
        let round = self.round + 1;
        let participants = self.sample_participants(round);

        let received: Vec<Vec<LoraAdapter>> = participants
            .iter()
            .map(|&id| self.distribute(&self.profile(id).ranks))
            .collect::<Result<_>>()?;
        let phi = match &self.global {
            GlobalModel::Delta(fd) => self.phi_records(fd, &participants, &received)?,
            _ => Vec::new(),
        };

        let opt = self.local_optimizer(round);
        let outcomes = participants
            .par_iter()
            .zip(received.into_par_iter())
            .map(|(&id, adapters)| {
                let local_seed = seed::derive(self.cfg.seed, &[seed::TAG_LOCAL, round as u64, id.0 as u64]);
                local_update(
                    &self.world.base,
                    adapters.into_iter().map(Some).collect(),
                    &self.dataset(id).train,
                    &opt,
                    local_seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let train_loss =
            outcomes.iter().map(|o| o.train_loss).sum::<f64>() / outcomes.len() as f64;
        let contributions = participants
            .iter()
            .zip(outcomes)
            .map(|(&id, o)| {
                let mut adapters: Vec<LoraAdapter> = o.adapters.into_iter().flatten().collect();
                if self.cfg.strategy == Strategy::HetLora && self.cfg.hetlora_prune {
                    adapters = adapters
                        .iter()
                        .map(|a| hetlora_prune(a, self.cfg.hetlora_decay))
                        .collect::<Result<_>>()?;
                }
                Ok(Contribution {
                    client_id: id,
                    adapters,
                    sample_count: self.dataset(id).train.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let (global, factors) = match self.cfg.strategy {
            Strategy::FlexLora => {
                let fd = aggregate_flexlora(&contributions)?.factorize()?;
                let factors = fd.factors.clone();
                (GlobalModel::Delta(fd), factors)
            }
            Strategy::Naive => {
                let g = aggregate_naive(&contributions)?;
                let f = factorize_adapters(&g)?;
                (GlobalModel::Factors(g), f)
            }
            Strategy::HetLora => {
                let g = self.merge_hetlora(aggregate_hetlora(&contributions)?)?;
                let f = factorize_adapters(&g)?;
                (GlobalModel::Factors(g), f)
            }
        };
        self.global = global;
        self.round = round;
        self.trained.extend(participants.iter().copied());
        self.last_contributions = contributions;

        let zeroshot_pool = unseen_pool(
            self.world,
            &self.trained,
            self.cfg.zeroshot_pool,
            seed::derive(self.cfg.seed, &[round as u64]),
        )?;
        let zeroshot_loss = if zeroshot_pool.is_empty() {
            f64::NAN
        } else {
            self.zeroshot_loss(&zeroshot_pool)?
        };
        let cost_per_round = participants
            .iter()
            .map(|&id| self.profile(id).cost_ratio(&self.shapes))
            .sum::<f64>()
            / participants.len() as f64;

        Ok(RoundReport {
            round,
            participants,
            train_loss,
            val_loss: self.validation_loss()?,
            zeroshot_loss,
            zeroshot_pool,
            spectra: factors.iter().map(|f| f.sigma.clone()).collect(),
            error_ratios: factors.iter().map(error_ratio_curve).collect(),
            phi,
            cost_per_round,
        })
    }

    fn phi_records(
        &self,
        fd: &FactorizedDelta,
        participants: &[ClientId],
        received: &[Vec<LoraAdapter>],
    ) -> Result<Vec<PhiRecord>> {
        let norms = fd.norms();
        let mut out = Vec::new();
        for (&id, adapters) in participants.iter().zip(received) {
            let profile = self.profile(id);
            let tails = fd.truncation_errors(&profile.ranks)?;
            for (layer, a) in adapters.iter().enumerate() {
                let measured = frobenius_norm(&compose(a).sub(&fd.delta.layers[layer])?);
                out.push(PhiRecord {
                    client_id: id,
                    config_type: profile.config_type,
                    layer,
                    rank: profile.ranks[layer],
                    measured,
                    tail_formula: tails[layer],
                    delta_norm: norms[layer],
                });
            }
        }
        Ok(out)
    }

    /// Columns/rows beyond this round's largest contributed rank keep their
    /// previous global values, so the global pair stays at the palette's
    /// maximum rank.
    fn merge_hetlora(&self, avg: Vec<LoraAdapter>) -> Result<Vec<LoraAdapter>> {
        let max_ranks = self.cfg.palette.max_ranks();
        let s = self.cfg.scaling;
        let previous: Vec<LoraAdapter> = match &self.global {
            GlobalModel::Factors(g) => g.clone(),
            GlobalModel::Initial { downs } => self
                .shapes
                .iter()
                .zip(downs)
                .map(|(shape, d)| {
                    let r = d.rows();
                    LoraAdapter::new(
                        Matrix::zeros(shape.out_dim, r),
                        d.map(|x| x / (r as f64).sqrt()),
                        s,
                    )
                })
                .collect::<Result<_>>()?,
            GlobalModel::Delta(_) => unreachable!("HETLORA never holds a full delta"),
        };
        avg.into_iter()
            .zip(previous)
            .zip(max_ranks)
            .map(|((new, prev), r_max)| {
                let r_new = new.rank();
                if r_new >= r_max {
                    return Ok(new);
                }
                let up = Matrix::from_fn(new.up().rows(), r_max, |i, j| {
                    if j < r_new {
                        new.up()[(i, j)]
                    } else {
                        prev.up()[(i, j)]
                    }
                });
                let down = Matrix::from_fn(r_max, new.down().cols(), |i, j| {
                    if i < r_new {
                        new.down()[(i, j)]
                    } else {
                        prev.down()[(i, j)]
                    }
                });
                LoraAdapter::new(up, down, new.scaling())
            })
            .collect()
    }
}

fn factorize_adapters(global: &[LoraAdapter]) -> Result<Vec<SvdFactors>> {
    global.par_iter().map(|a| svd(&compose(a))).collect()
}
