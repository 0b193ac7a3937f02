use serde::{Deserialize, Serialize};

use super::experiment::run_experiment_with;
use super::FedConfig;
use crate::error::{Error, Result};
use crate::taskgen::World;

/// `|C| = A1 / ε² · (A2 − ln(ε − A3))`, fitted in `|C|` space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Observed minus fitted pool size, per point.
    pub residuals: Vec<f64>,
    pub rmse: f64,
}

impl ScalingFit {
    pub fn predict_pool(&self, loss: f64) -> f64 {
        self.a1 / (loss * loss) * (self.a2 - (loss - self.a3).ln())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub pool_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `losses[i][j]`: final zero-shot loss for pool size `i`, seed `j`.
    pub losses: Vec<Vec<f64>>,
    pub mean_losses: Vec<f64>,
    /// `None` with fewer than three distinct pool sizes.
    pub fit: Option<ScalingFit>,
}

impl ScalingResult {
    /// Averages per-seed losses and fits the law over the means.
    pub fn from_losses(pool_sizes: &[usize], seeds: &[u64], losses: Vec<Vec<f64>>) -> Self {
        let mean_losses: Vec<f64> = losses
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect();
        let pools: Vec<f64> = pool_sizes.iter().map(|&p| p as f64).collect();
        Self {
            pool_sizes: pool_sizes.to_vec(),
            seeds: seeds.to_vec(),
            losses,
            fit: fit_scaling_law(&pools, &mean_losses),
            mean_losses,
        }
    }

    pub fn is_non_increasing(&self) -> bool {
        self.mean_losses.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Final zero-shot loss for each training pool size, with a fixed number of
/// participants per round. Every run shares the world, its datasets and the
/// held-out population for a given seed.
pub fn client_scaling_experiment(
    world: &World,
    base: &FedConfig,
    pool_sizes: &[usize],
    seeds: &[u64],
) -> Result<ScalingResult> {
    if pool_sizes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("pool sizes and seeds must be non-empty".into()));
    }
    let datasets = world.all_datasets()?;
    let mut losses = Vec::with_capacity(pool_sizes.len());
    for &size in pool_sizes {
        let mut row = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut cfg = base.clone();
            cfg.train_pool = Some(size);
            cfg.seed = s;
            let res = run_experiment_with(world, &cfg, datasets.clone())?;
            row.push(res.final_zeroshot_loss);
        }
        losses.push(row);
    }
    Ok(ScalingResult::from_losses(pool_sizes, seeds, losses))
}

/// For fixed `A3` the form is linear: `|C|ε² = c0 + c1·ln(ε − A3)` with
/// `A1 = −c1`, `A2 = c0 / A1`. `A3` is scanned on a grid in `[0, min ε)`
/// and the candidate with the smallest squared residual in `|C|` wins,
/// then refined by golden-section search between its grid neighbours.
pub fn fit_scaling_law(pools: &[f64], losses: &[f64]) -> Option<ScalingFit> {
    let mut distinct = pools.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if pools.len() != losses.len() || distinct.len() < 3 {
        return None;
    }
    if losses.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
        return None;
    }
    let min_loss = losses.iter().copied().fold(f64::INFINITY, f64::min);
    const GRID: usize = 2000;
    let step = min_loss / GRID as f64;
    let mut best: Option<ScalingFit> = None;
    for g in 0..GRID {
        if let Some(c) = fit_at(pools, losses, step * g as f64) {
            if best.as_ref().is_none_or(|b| c.rmse < b.rmse) {
                best = Some(c);
            }
        }
    }
    // Golden-section refinement inside the neighbouring grid cells; the fit
    // is very sensitive to A3 when the smallest loss sits close to it.
    let centre = best.as_ref()?.a3;
    let (mut lo, mut hi) = ((centre - step).max(0.0), (centre + step).min(min_loss * (1.0 - 1e-12)));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let rmse_at = |a3: f64| fit_at(pools, losses, a3).map_or(f64::INFINITY, |f| f.rmse);
    for _ in 0..200 {
        let x1 = hi - ratio * (hi - lo);
        let x2 = lo + ratio * (hi - lo);
        if rmse_at(x1) <= rmse_at(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    if let Some(c) = fit_at(pools, losses, 0.5 * (lo + hi)) {
        if best.as_ref().is_none_or(|b| c.rmse < b.rmse) {
            best = Some(c);
        }
    }
    best
}

fn fit_at(pools: &[f64], losses: &[f64], a3: f64) -> Option<ScalingFit> {
    let xs: Vec<f64> = losses.iter().map(|&e| (e - a3).ln()).collect();
    let ys: Vec<f64> = pools.iter().zip(losses).map(|(&c, &e)| c * e * e).collect();
    let (c0, c1) = linear_fit(&xs, &ys)?;
    if c1 == 0.0 {
        return None;
    }
    let a1 = -c1;
    let candidate = ScalingFit {
        a1,
        a2: c0 / a1,
        a3,
        residuals: Vec::new(),
        rmse: 0.0,
    };
    let residuals: Vec<f64> = pools
        .iter()
        .zip(losses)
        .map(|(&c, &e)| c - candidate.predict_pool(e))
        .collect();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    rmse.is_finite().then_some(ScalingFit {
        residuals,
        rmse,
        ..candidate
    })
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let c1 = sxy / sxx;
    Some((my - c1 * mx, c1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_law() {
        let truth = ScalingFit {
            a1: 3.0,
            a2: 2.0,
            a3: 0.05,
            residuals: vec![],
            rmse: 0.0,
        };
        let losses = [0.4, 0.3, 0.25, 0.2];
        let pools: Vec<f64> = losses.iter().map(|&e| truth.predict_pool(e)).collect();
        let fit = fit_scaling_law(&pools, &losses).unwrap();
        let rel = fit.rmse / pools.iter().sum::<f64>();
        assert!(rel < 1e-3, "{fit:?}");
    }

    #[test]
    fn underdetermined_skipped() {
        assert!(fit_scaling_law(&[10.0], &[0.5]).is_none());
        assert!(fit_scaling_law(&[10.0, 10.0, 50.0], &[0.5, 0.4, 0.3]).is_none());
    }
}
