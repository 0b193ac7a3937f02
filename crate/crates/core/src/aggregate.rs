//! Server-side aggregation: factor averaging, full-delta averaging with SVD
//! redistribution, and zero-padded heterogeneous averaging.
//!
//! Every strategy sorts contributions by client id before reducing, so
//! results do not depend on arrival order.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{compose, from_factors_with, LayerShape, LoraAdapter};
use crate::error::{Error, Result};
use crate::lowrank::{frobenius_norm, svd, truncation_error, weighted_sum, Matrix, SvdFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One client's upload: its per-layer adapters and local dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub client_id: ClientId,
    pub adapters: Vec<LoraAdapter>,
    pub sample_count: usize,
}

/// Per-layer global weight delta `W_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDelta {
    pub layers: Vec<Matrix>,
}

/// A global delta together with one SVD per layer.
#[derive(Debug, Clone)]
pub struct FactorizedDelta {
    pub delta: GlobalDelta,
    pub factors: Vec<SvdFactors>,
}

fn sorted(contribs: &[Contribution]) -> Result<Vec<&Contribution>> {
    if contribs.is_empty() {
        return Err(Error::NoContributions);
    }
    let mut out: Vec<&Contribution> = contribs.iter().collect();
    out.sort_by_key(|c| c.client_id);
    let first = out[0];
    if first.sample_count == 0 {
        return Err(Error::InvalidConfig(format!(
            "client {} has zero samples",
            first.client_id
        )));
    }
    let shapes: Vec<LayerShape> = first.adapters.iter().map(|a| a.shape()).collect();
    for c in &out[1..] {
        if c.sample_count == 0 {
            return Err(Error::InvalidConfig(format!(
                "client {} has zero samples",
                c.client_id
            )));
        }
        let theirs: Vec<LayerShape> = c.adapters.iter().map(|a| a.shape()).collect();
        if theirs != shapes {
            return Err(Error::ShapeMismatch(format!(
                "client {} layer shapes {:?} differ from client {} {:?}",
                c.client_id, theirs, first.client_id, shapes
            )));
        }
    }
    Ok(out)
}

/// `γ^i = n^i / Σ n^j` in client-id order.
pub fn aggregation_weights(contribs: &[Contribution]) -> Result<Vec<(ClientId, f64)>> {
    let ordered = sorted(contribs)?;
    Ok(weights_of(&ordered))
}

fn weights_of(ordered: &[&Contribution]) -> Vec<(ClientId, f64)> {
    let total: f64 = ordered.iter().map(|c| c.sample_count as f64).sum();
    ordered
        .iter()
        .map(|c| (c.client_id, c.sample_count as f64 / total))
        .collect()
}

/// `W_g = Σ n^i s B^i A^i / Σ n^i` per layer; ranks may differ per client.
pub fn aggregate_flexlora(contribs: &[Contribution]) -> Result<GlobalDelta> {
    let ordered = sorted(contribs)?;
    let weights: Vec<f64> = weights_of(&ordered).into_iter().map(|(_, w)| w).collect();
    let layers = (0..ordered[0].adapters.len())
        .into_par_iter()
        .map(|l| {
            let composed: Vec<Matrix> = ordered.iter().map(|c| compose(&c.adapters[l])).collect();
            let refs: Vec<&Matrix> = composed.iter().collect();
            weighted_sum(&refs, &weights)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlobalDelta { layers })
}

impl GlobalDelta {
    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|m| LayerShape {
                out_dim: m.rows(),
                in_dim: m.cols(),
            })
            .collect()
    }

    /// One SVD per layer.
    pub fn factorize(self) -> Result<FactorizedDelta> {
        let factors = self
            .layers
            .par_iter()
            .map(svd)
            .collect::<Result<Vec<_>>>()?;
        Ok(FactorizedDelta {
            delta: self,
            factors,
        })
    }
}

impl FactorizedDelta {
    /// Rank-budgeted adapters for one client (`ranks` per layer).
    pub fn adapters_for(&self, ranks: &[usize], s: f64) -> Result<Vec<LoraAdapter>> {
        self.adapters_for_with(ranks, s, false)
    }

    pub(crate) fn adapters_for_with(
        &self,
        ranks: &[usize],
        s: f64,
        flip_sign: bool,
    ) -> Result<Vec<LoraAdapter>> {
        if ranks.len() != self.factors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rank budgets for {} layers",
                ranks.len(),
                self.factors.len()
            )));
        }
        self.factors
            .iter()
            .zip(ranks)
            .map(|(f, &r)| from_factors_with(f, r, s, flip_sign))
            .collect()
    }

    /// Per-layer `φ = sqrt(Σ_{j>r} σ_j²)` for the given budgets.
    pub fn truncation_errors(&self, ranks: &[usize]) -> Result<Vec<f64>> {
        self.factors
            .iter()
            .zip(ranks)
            .map(|(f, &r)| truncation_error(f, r))
            .collect()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.delta.layers.iter().map(frobenius_norm).collect()
    }
}

/// Splits the global delta into per-client rank-budgeted adapters. The SVD
/// is computed once per layer and indexed per client.
pub fn redistribute(
    delta: &GlobalDelta,
    ranks: &[Vec<usize>],
    s: f64,
) -> Result<Vec<Vec<LoraAdapter>>> {
    let fd = delta.clone().factorize()?;
    ranks.iter().map(|r| fd.adapters_for(r, s)).collect()
}

fn average_factors(ordered: &[&Contribution], padded: &[Vec<LoraAdapter>]) -> Result<Vec<LoraAdapter>> {
    let weights: Vec<f64> = weights_of(ordered).into_iter().map(|(_, w)| w).collect();
    (0..padded[0].len())
        .map(|l| {
            let ups: Vec<&Matrix> = padded.iter().map(|a| a[l].up()).collect();
            let downs: Vec<&Matrix> = padded.iter().map(|a| a[l].down()).collect();
            LoraAdapter::new(
                weighted_sum(&ups, &weights)?,
                weighted_sum(&downs, &weights)?,
                padded[0][l].scaling(),
            )
        })
        .collect()
}

/// `B_g = Σ n^i B^i / Σ n^i`, `A_g = Σ n^i A^i / Σ n^i`; every client must
/// hold the same rank on each layer.
pub fn aggregate_naive(contribs: &[Contribution]) -> Result<Vec<LoraAdapter>> {
    let ordered = sorted(contribs)?;
    let ranks: Vec<usize> = ordered[0].adapters.iter().map(|a| a.rank()).collect();
    for c in &ordered[1..] {
        let theirs: Vec<usize> = c.adapters.iter().map(|a| a.rank()).collect();
        if theirs != ranks {
            return Err(Error::HeterogeneousRanksUnsupported(format!(
                "client {} has ranks {:?}, client {} has {:?}",
                c.client_id, theirs, ordered[0].client_id, ranks
            )));
        }
    }
    let adapters: Vec<Vec<LoraAdapter>> = ordered.iter().map(|c| c.adapters.clone()).collect();
    average_factors(&ordered, &adapters)
}

/// Zero-pads each client's factors to the per-layer maximum rank and
/// averages elementwise.
pub fn aggregate_hetlora(contribs: &[Contribution]) -> Result<Vec<LoraAdapter>> {
    let ordered = sorted(contribs)?;
    let layers = ordered[0].adapters.len();
    let max_ranks: Vec<usize> = (0..layers)
        .map(|l| ordered.iter().map(|c| c.adapters[l].rank()).max().unwrap_or(1))
        .collect();
    let padded = ordered
        .iter()
        .map(|c| {
            c.adapters
                .iter()
                .zip(&max_ranks)
                .map(|(a, &r)| a.padded(r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    average_factors(&ordered, &padded)
}

/// Leading `ranks[l]` columns/rows of each global factor pair.
pub fn hetlora_distribute(global: &[LoraAdapter], ranks: &[usize]) -> Result<Vec<LoraAdapter>> {
    if global.len() != ranks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rank budgets for {} layers",
            ranks.len(),
            global.len()
        )));
    }
    global.iter().zip(ranks).map(|(a, &r)| a.leading(r.min(a.rank()))).collect()
}

/// Smallest `r'` whose leading singular components of `s·B·A` hold at least
/// `decay` of the total spectral energy `Σ σ_j²`, never below 1 and never
/// above the current rank.
pub fn hetlora_pruned_rank(adapter: &LoraAdapter, decay: f64) -> Result<usize> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::InvalidDecay(decay));
    }
    let f = svd(&compose(adapter))?;
    let cumulative: Vec<f64> = f
        .sigma
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s * s;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&0.0);
    let keep = cumulative
        .iter()
        .position(|&c| c >= decay * total)
        .map_or(1, |i| i + 1);
    Ok(keep.clamp(1, adapter.rank()))
}

/// Prunes to [`hetlora_pruned_rank`], replacing the factors by the best
/// rank-`r'` fit of the composed delta. An adapter that keeps its rank is
/// returned unchanged.
pub fn hetlora_prune(adapter: &LoraAdapter, decay: f64) -> Result<LoraAdapter> {
    let keep = hetlora_pruned_rank(adapter, decay)?;
    if keep == adapter.rank() {
        return Ok(adapter.clone());
    }
    let f = svd(&compose(adapter))?;
    from_factors_with(&f, keep, adapter.scaling(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{matmul, truncate};

    fn adapter(seed: u64, d: usize, p: usize, r: usize, s: f64) -> LoraAdapter {
        let mut rng = crate::seed::rng(seed, &[]);
        LoraAdapter::new(
            Matrix::gaussian(d, r, 1.0, &mut rng),
            Matrix::gaussian(r, p, 1.0, &mut rng),
            s,
        )
        .unwrap()
    }

    fn contrib(id: u32, n: usize, adapters: Vec<LoraAdapter>) -> Contribution {
        Contribution {
            client_id: ClientId(id),
            adapters,
            sample_count: n,
        }
    }

    #[test]
    fn empty_is_rejected_everywhere() {
        assert_eq!(aggregate_flexlora(&[]), Err(Error::NoContributions));
        assert_eq!(aggregate_naive(&[]), Err(Error::NoContributions));
        assert_eq!(aggregate_hetlora(&[]), Err(Error::NoContributions));
    }

    #[test]
    fn singleton_flexlora_is_compose() {
        let a = adapter(1, 6, 5, 2, 2.0);
        let g = aggregate_flexlora(&[contrib(0, 7, vec![a.clone()])]).unwrap();
        assert_eq!(g.layers[0], compose(&a));
    }

    #[test]
    fn identical_pair_is_idempotent() {
        let a = adapter(2, 6, 5, 3, 1.0);
        let g = aggregate_flexlora(&[contrib(0, 4, vec![a.clone()]), contrib(1, 4, vec![a.clone()])])
            .unwrap();
        let diff = frobenius_norm(&g.layers[0].sub(&compose(&a)).unwrap());
        assert!(diff < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = adapter(3, 6, 5, 2, 1.0);
        let b = adapter(4, 6, 4, 2, 1.0);
        assert!(matches!(
            aggregate_flexlora(&[contrib(0, 1, vec![a]), contrib(1, 1, vec![b])]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn naive_rejects_mixed_ranks() {
        let a = adapter(5, 6, 5, 2, 1.0);
        let b = adapter(6, 6, 5, 3, 1.0);
        assert!(matches!(
            aggregate_naive(&[contrib(0, 1, vec![a]), contrib(1, 1, vec![b])]),
            Err(Error::HeterogeneousRanksUnsupported(_))
        ));
    }

    #[test]
    fn naive_cancellation() {
        let a = adapter(7, 4, 3, 2, 1.0);
        let neg = LoraAdapter::new(a.up().map(|x| -x), a.down().clone(), 1.0).unwrap();
        let g = aggregate_naive(&[contrib(0, 3, vec![a.clone()]), contrib(1, 3, vec![neg])]).unwrap();
        assert_eq!(g[0].up().max_abs(), 0.0);
        assert_eq!(g[0].down(), a.down());
    }

    #[test]
    fn hetlora_zero_pad_arithmetic() {
        let one = adapter(8, 4, 3, 1, 1.0);
        let two = adapter(9, 4, 3, 2, 1.0);
        let g = aggregate_hetlora(&[contrib(0, 5, vec![one.clone()]), contrib(1, 5, vec![two.clone()])])
            .unwrap();
        assert_eq!(g[0].rank(), 2);
        for i in 0..4 {
            assert!((g[0].up()[(i, 1)] - 0.5 * two.up()[(i, 1)]).abs() < 1e-15);
            assert!((g[0].up()[(i, 0)] - 0.5 * (one.up()[(i, 0)] + two.up()[(i, 0)])).abs() < 1e-15);
        }
        let dist = hetlora_distribute(&g, &[1]).unwrap();
        assert_eq!(dist[0].rank(), 1);
    }

    #[test]
    fn redistribute_saturated_budgets() {
        let mut rng = crate::seed::rng(10, &[]);
        let w = matmul(
            &Matrix::gaussian(8, 2, 1.0, &mut rng),
            &Matrix::gaussian(2, 6, 1.0, &mut rng),
        )
        .unwrap();
        let delta = GlobalDelta { layers: vec![w.clone()] };
        let out = redistribute(&delta, &[vec![2], vec![5]], 1.0).unwrap();
        for client in out {
            let err = frobenius_norm(&compose(&client[0]).sub(&w).unwrap()) / frobenius_norm(&w);
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn redistribute_rank_errors() {
        let delta = GlobalDelta {
            layers: vec![Matrix::identity(3)],
        };
        assert!(matches!(
            redistribute(&delta, &[vec![4]], 1.0),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            redistribute(&delta, &[vec![1, 1]], 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn redistribute_full_rank_reproduces_delta() {
        let mut rng = crate::seed::rng(11, &[]);
        let w = Matrix::gaussian(5, 5, 1.0, &mut rng);
        let delta = GlobalDelta { layers: vec![w.clone()] };
        let fd = delta.clone().factorize().unwrap();
        let a = fd.adapters_for(&[5], 3.0).unwrap();
        assert!(frobenius_norm(&compose(&a[0]).sub(&w).unwrap()) < 1e-10);
        let t = truncate(&fd.factors[0], 5).unwrap();
        assert!(frobenius_norm(&t.sub(&w).unwrap()) < 1e-10);
    }

    #[test]
    fn prune_decay_bounds() {
        let a = adapter(12, 6, 6, 3, 1.0);
        assert_eq!(hetlora_prune(&a, 0.0), Err(Error::InvalidDecay(0.0)));
        assert_eq!(hetlora_prune(&a, 1.5), Err(Error::InvalidDecay(1.5)));
        assert_eq!(hetlora_prune(&a, 1.0).unwrap(), a);
    }

    #[test]
    fn prune_exact_rank_one() {
        let mut rng = crate::seed::rng(13, &[]);
        let col = Matrix::gaussian(6, 1, 1.0, &mut rng);
        let up = Matrix::from_fn(6, 4, |i, j| col[(i, 0)] * (j as f64 + 1.0));
        let row = Matrix::gaussian(1, 5, 1.0, &mut rng);
        let down = Matrix::from_fn(4, 5, |_, j| row[(0, j)]);
        let a = LoraAdapter::new(up, down, 1.0).unwrap();
        let pruned = hetlora_prune(&a, 0.99).unwrap();
        assert_eq!(pruned.rank(), 1);
        let err = frobenius_norm(&compose(&pruned).sub(&compose(&a)).unwrap());
        assert!(err < 1e-9 * frobenius_norm(&compose(&a)));
    }
}
