//! Runtime invariant suites behind `flexlora verify`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::adapter::{compose, from_factors_with, LayerShape, LoraAdapter};
use crate::aggregate::{
    aggregate_flexlora, aggregate_hetlora, aggregate_naive, aggregation_weights, ClientId,
    Contribution,
};
use crate::cli::report::{self, RunRecord};
use crate::error::{Error, Result};
use crate::federation::{
    run_experiment, ConfigType, ExperimentResult, FedConfig, Federation, GlobalModel,
    ResourceDistribution, Strategy,
};
use crate::lowrank::{
    frobenius_norm, matmul_tn, svd, truncate, truncation_error, weighted_sum, Matrix,
};
use crate::model::{grads, local_update, loss, Batch, FrozenBase, OptimizerConfig, ToyModel};
use crate::seed;
use crate::taskgen::{gen_world, split_sizes, WorldConfig};

/// Deliberate defects for exercising the runner itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negates `B` whenever an adapter is built from SVD factors.
    pub flip_decompose_sign: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
        }
    }

    /// Records `value <= tol`.
    fn within(&mut self, name: &str, value: f64, tol: f64) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed: value <= tol,
            detail: format!("worst {value:.3e} (tol {tol:.0e})"),
        });
    }

    fn holds(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed: ok,
            detail: detail.into(),
        });
    }

    /// Records the outcome of a fallible check body.
    fn run(&mut self, name: &str, body: impl FnOnce() -> Result<(bool, String)>) {
        match body() {
            Ok((ok, detail)) => self.holds(name, ok, detail),
            Err(e) => self.holds(name, false, format!("error: {e}")),
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            checks: self.checks,
        }
    }
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    frobenius_norm(&a.sub(b).expect("same shape")) / frobenius_norm(b).max(f64::MIN_POSITIVE)
}

fn gram_defect(q: &Matrix) -> f64 {
    let g = matmul_tn(q, q).expect("square gram");
    g.sub(&Matrix::identity(g.rows())).expect("same shape").max_abs()
}

fn random(rows: usize, cols: usize, seed_value: u64) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, &mut seed::rng(seed_value, &[]))
}

/// Runs every suite; `faults` injects defects for testing the runner.
pub fn run_verify(faults: Faults) -> Vec<SuiteResult> {
    vec![
        lowrank_suite(),
        adapter_suite(faults),
        aggregate_suite(),
        model_suite(),
        taskgen_suite(),
        federation_suite(),
        cli_suite(),
    ]
}

const SHAPES: [(usize, usize); 6] = [(5, 3), (3, 5), (16, 16), (64, 32), (32, 64), (128, 128)];

fn lowrank_suite() -> SuiteResult {
    let mut s = Suite::new("lowrank");
    let mut orth: f64 = 0.0;
    let mut recon: f64 = 0.0;
    let mut tail: f64 = 0.0;
    let mut monotone = true;
    let mut deterministic = true;
    for (i, &(d, p)) in SHAPES.iter().enumerate() {
        let w = random(d, p, 100 + i as u64);
        let f = svd(&w).expect("finite input");
        orth = orth.max(gram_defect(&f.u)).max(gram_defect(&f.v));
        recon = recon.max(rel(&truncate(&f, f.k()).expect("full rank"), &w));
        let norm = frobenius_norm(&w);
        let mut prev = f64::INFINITY;
        for r in 1..=f.k() {
            let e = truncation_error(&f, r).expect("valid rank");
            let direct = frobenius_norm(&truncate(&f, r).expect("valid rank").sub(&w).expect("same shape"));
            tail = tail.max((e - direct).abs() / norm);
            monotone &= e <= prev;
            prev = e;
        }
        deterministic &= svd(&w).expect("finite input") == f;
    }
    s.within("orthonormality", orth, 1e-10);
    s.within("reconstruction", recon, 1e-10);
    s.within("tail_formula", tail, 1e-10);
    s.holds("monotone_error", monotone, "truncation error non-increasing in rank");
    s.holds("determinism", deterministic, "repeated factorizations bit-identical");
    s.finish()
}

fn adapter_suite(faults: Faults) -> SuiteResult {
    let mut s = Suite::new("adapter");
    let mut roundtrip: f64 = 0.0;
    let mut neutrality: f64 = 0.0;
    let mut rank_ok = true;
    for (i, &(d, p)) in SHAPES.iter().take(5).enumerate() {
        let w = random(d, p, 200 + i as u64);
        let f = svd(&w).expect("finite input");
        for r in [1, f.k() / 2 + 1, f.k()] {
            let build = |scale: f64| {
                compose(&from_factors_with(&f, r, scale, faults.flip_decompose_sign).expect("valid rank"))
            };
            let c1 = build(1.0);
            roundtrip = roundtrip.max(rel(&c1, &truncate(&f, r).expect("valid rank")));
            neutrality = neutrality.max(rel(&build(0.5), &build(2.0)));
            rank_ok &= svd(&c1).expect("finite").numerical_rank(1e-10) <= r;
        }
    }
    s.within("roundtrip", roundtrip, 1e-10);
    s.within("scaling_neutrality", neutrality, 1e-12);
    s.holds("rank_bound", rank_ok, "numerical rank of composed delta <= r");
    s.finish()
}

fn contributions(ranks: &[usize], seed_value: u64) -> Vec<Contribution> {
    let mut rng = seed::rng(seed_value, &[]);
    ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| Contribution {
            client_id: ClientId(i as u32 * 7 % 11),
            adapters: vec![
                LoraAdapter::new(
                    Matrix::gaussian(12, r, 1.0, &mut rng),
                    Matrix::gaussian(r, 10, 1.0, &mut rng),
                    1.5,
                )
                .expect("valid factors"),
            ],
            sample_count: rng.random_range(5..50),
        })
        .collect()
}

fn max_diff(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.sub(y).expect("same shape").max_abs())
        .fold(0.0, f64::max)
}

fn aggregate_suite() -> SuiteResult {
    let mut s = Suite::new("aggregate");
    let hetero = contributions(&[2, 4, 3, 4, 1], 300);
    let homo = contributions(&[3, 3, 3, 3], 301);

    s.run("weight_normalization", || {
        let w = aggregation_weights(&hetero)?;
        let err = (w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs();
        Ok((err <= 1e-12, format!("|Σγ − 1| = {err:.3e}")))
    });

    s.run("order_invariance", || {
        let mut shuffled = hetero.clone();
        shuffled.reverse();
        shuffled.shuffle(&mut seed::rng(302, &[]));
        let mut homo_shuffled = homo.clone();
        homo_shuffled.reverse();
        let flex = max_diff(&aggregate_flexlora(&hetero)?.layers, &aggregate_flexlora(&shuffled)?.layers);
        let het = max_diff(
            &aggregate_hetlora(&hetero)?.iter().map(compose).collect::<Vec<_>>(),
            &aggregate_hetlora(&shuffled)?.iter().map(compose).collect::<Vec<_>>(),
        );
        let naive = max_diff(
            &aggregate_naive(&homo)?.iter().map(compose).collect::<Vec<_>>(),
            &aggregate_naive(&homo_shuffled)?.iter().map(compose).collect::<Vec<_>>(),
        );
        let worst = flex.max(het).max(naive);
        Ok((worst <= 1e-12, format!("worst {worst:.3e}")))
    });

    s.run("flexlora_linearity", || {
        let mut ordered: Vec<&Contribution> = hetero.iter().collect();
        ordered.sort_by_key(|c| c.client_id);
        let deltas: Vec<Matrix> = ordered.iter().map(|c| compose(&c.adapters[0])).collect();
        let total: usize = ordered.iter().map(|c| c.sample_count).sum();
        let gammas: Vec<f64> = ordered.iter().map(|c| c.sample_count as f64 / total as f64).collect();
        let expected = weighted_sum(&deltas.iter().collect::<Vec<_>>(), &gammas)?;
        let got = &aggregate_flexlora(&hetero)?.layers[0];
        Ok((got == &expected, "bit-identical to weighted sum".to_string()))
    });

    s.run("homogeneous_consistency", || {
        let one = &homo[0];
        let clones: Vec<Contribution> = (0..4)
            .map(|i| Contribution {
                client_id: ClientId(i),
                ..one.clone()
            })
            .collect();
        let flex = aggregate_flexlora(&clones)?.layers;
        let naive: Vec<Matrix> = aggregate_naive(&clones)?.iter().map(compose).collect();
        let het: Vec<Matrix> = aggregate_hetlora(&clones)?.iter().map(compose).collect();
        let worst = rel(&flex[0], &naive[0]).max(rel(&het[0], &naive[0]));
        Ok((worst <= 1e-10, format!("worst {worst:.3e}")))
    });

    s.run("redistribution_fidelity", || {
        let fd = aggregate_flexlora(&hetero)?.factorize()?;
        let norm = fd.norms()[0];
        let mut worst: f64 = 0.0;
        for r in 1..=fd.factors[0].k() {
            let a = &fd.adapters_for(&[r], 1.5)?[0];
            let measured = frobenius_norm(&compose(a).sub(&fd.delta.layers[0])?);
            let formula = fd.truncation_errors(&[r])?[0];
            worst = worst.max((measured - formula).abs() / norm);
        }
        Ok((worst <= 1e-9, format!("worst {worst:.3e}")))
    });
    s.finish()
}

fn toy_model(seed_value: u64) -> (ToyModel, Batch) {
    let mut rng = seed::rng(seed_value, &[]);
    let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=16)).collect();
    let layers: Vec<Matrix> = (0..2)
        .map(|l| Matrix::gaussian(dims[l + 1], dims[l], 0.5, &mut rng))
        .collect();
    let base = Arc::new(FrozenBase::new(layers).expect("chained dims"));
    let adapters = base
        .shapes()
        .iter()
        .map(|sh| {
            let r = rng.random_range(1..=sh.max_rank().min(4));
            Some(
                LoraAdapter::new(
                    Matrix::gaussian(sh.out_dim, r, 0.3, &mut rng),
                    Matrix::gaussian(r, sh.in_dim, 0.3, &mut rng),
                    rng.random_range(0.5..2.0),
                )
                .expect("valid factors"),
            )
        })
        .collect();
    let n = rng.random_range(1..=6);
    let batch = Batch::new(
        Matrix::gaussian(n, dims[0], 1.0, &mut rng),
        Matrix::gaussian(n, dims[2], 1.0, &mut rng),
    )
    .expect("matching rows");
    (ToyModel::new(base, adapters).expect("matching shapes"), batch)
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)` over
/// every adapter coordinate, with central differences of step `1e-5`.
pub fn gradient_check(model: &ToyModel, batch: &Batch, l2: f64) -> Result<f64> {
    const H: f64 = 1e-5;
    let analytic = grads(model, batch, l2)?;
    let mut worst: f64 = 0.0;
    for (l, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        for which in 0..2 {
            let n = if which == 0 { g.up.as_slice().len() } else { g.down.as_slice().len() };
            for k in 0..n {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let a = m.adapters[l].as_mut().expect("adapter present");
                    let p = if which == 0 { a.up_mut() } else { a.down_mut() };
                    p.as_mut_slice()[k] += delta;
                    loss(&m, batch, l2)
                };
                let numeric = (eval(H)? - eval(-H)?) / (2.0 * H);
                let exact = if which == 0 { g.up.as_slice()[k] } else { g.down.as_slice()[k] };
                let denom = exact.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max((exact - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

fn model_suite() -> SuiteResult {
    let mut s = Suite::new("model");
    s.run("gradient_check", || {
        let mut worst: f64 = 0.0;
        for i in 0..10 {
            let (m, b) = toy_model(400 + i);
            worst = worst.max(gradient_check(&m, &b, if i % 2 == 0 { 0.0 } else { 0.01 })?);
        }
        Ok((worst <= 1e-5, format!("worst {worst:.3e} (tol 1e-5)")))
    });
    s.run("frozen_base", || {
        let (m, b) = toy_model(450);
        let before = m.base.layers().to_vec();
        local_update(&m.base, m.adapters.clone(), &b, &OptimizerConfig::adam(0.01), 1)?;
        Ok((m.base.layers() == before.as_slice(), "base unchanged".to_string()))
    });
    s.run("loss_decrease", || {
        let mut bad = 0;
        for i in 0..20 {
            let (m, b) = toy_model(500 + i);
            let before = loss(&m, &b, 0.0)?;
            let opt = OptimizerConfig {
                batch_size: b.len(),
                ..OptimizerConfig::sgd(1e-3)
            };
            let after = local_update(&m.base, m.adapters.clone(), &b, &opt, i)?.train_loss;
            if after > before {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad}/20 seeds increased")))
    });
    s.run("determinism", || {
        let (m, b) = toy_model(600);
        let opt = OptimizerConfig::sgd(0.01);
        let a = local_update(&m.base, m.adapters.clone(), &b, &opt, 3)?;
        let c = local_update(&m.base, m.adapters.clone(), &b, &opt, 3)?;
        Ok((a == c, "repeated local updates bit-identical".to_string()))
    });
    s.finish()
}

fn small_world(seed_value: u64) -> WorldConfig {
    WorldConfig {
        num_clients: 60,
        num_archetypes: 4,
        layer_dims: vec![12, 12, 8],
        samples_min: 20,
        samples_max: 40,
        seed: seed_value,
        ..WorldConfig::default()
    }
}

fn taskgen_suite() -> SuiteResult {
    let mut s = Suite::new("taskgen");
    s.run("reproducibility", || {
        let a = gen_world(&small_world(7))?;
        let b = gen_world(&small_world(7))?;
        let same = a.base == b.base
            && a.teacher_deltas == b.teacher_deltas
            && a.clients == b.clients
            && a.all_datasets()? == b.all_datasets()?;
        Ok((same, "identical configs give identical worlds and datasets".to_string()))
    });
    s.run("split_disjointness", || {
        let w = gen_world(&small_world(8))?;
        let mut ok = (10..200).all(|n| {
            let (a, b, c) = split_sizes(n);
            a + b + c == n && b >= 1 && c >= 1
        });
        for ds in w.all_datasets()? {
            let all = Batch::concat(&[&ds.train, &ds.val, &ds.test])?;
            let mut rows: Vec<&[f64]> = (0..all.len()).map(|i| all.inputs.row(i)).collect();
            rows.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
            rows.dedup();
            ok &= rows.len() == ds.sample_count;
        }
        Ok((ok, "splits exhaustive with no shared samples".to_string()))
    });
    s.run("heterogeneity_dial", || {
        let mut ok = true;
        for seed_value in 0..3 {
            let mut prev = -1.0;
            for scale in [0.1, 0.3, 0.6, 1.0] {
                let d = gen_world(&WorldConfig {
                    specific_scale: scale,
                    ..small_world(seed_value)
                })?
                .mean_pairwise_teacher_distance();
                ok &= d > prev;
                prev = d;
            }
        }
        Ok((ok, "teacher distance increases with specific scale".to_string()))
    });
    s.finish()
}

fn small_fed(strategy: Strategy, distribution: ResourceDistribution) -> FedConfig {
    FedConfig {
        strategy,
        distribution,
        participation_rate: 0.2,
        max_rounds: 3,
        heldout_clients: 10,
        zeroshot_pool: 5,
        seed: 11,
        ..FedConfig::default()
    }
}

fn federation_suite() -> SuiteResult {
    let mut s = Suite::new("federation");
    let world = match gen_world(&small_world(9)) {
        Ok(w) => w,
        Err(e) => {
            s.holds("world", false, format!("error: {e}"));
            return s.finish();
        }
    };
    s.run("round_invariants", || {
        let mut fed = Federation::new(&world, small_fed(Strategy::FlexLora, ResourceDistribution::uniform()))?;
        let shapes: Vec<LayerShape> = fed.shapes().to_vec();
        let mut unique = true;
        let mut cost_err: f64 = 0.0;
        let mut phi_err: f64 = 0.0;
        let mut phi_monotone = true;
        let mut replay_err: f64 = 0.0;
        for _ in 0..3 {
            let before = match fed.global() {
                GlobalModel::Delta(fd) => Some(fd.clone()),
                _ => None,
            };
            let r = fed.run_round()?;
            let mut ids = r.participants.clone();
            ids.dedup();
            unique &= ids.len() == r.participants.len();
            let expected = r
                .participants
                .iter()
                .map(|&id| fed.profile(id).cost_ratio(&shapes))
                .sum::<f64>()
                / r.participants.len() as f64;
            cost_err = cost_err.max((expected - r.cost_per_round).abs());
            if let Some(fd) = before {
                for p in &r.phi {
                    let direct = truncation_error(&fd.factors[p.layer], p.rank)?;
                    phi_err = phi_err.max((p.measured - direct).abs() / p.delta_norm.max(f64::MIN_POSITIVE));
                    for q in r.phi.iter().filter(|q| q.layer == p.layer && q.rank > p.rank) {
                        phi_monotone &= q.measured <= p.measured + 1e-9 * p.delta_norm;
                    }
                }
            }
            let replay = aggregate_flexlora(fed.last_contributions())?;
            if let GlobalModel::Delta(fd) = fed.global() {
                replay_err = replay_err.max(max_diff(&replay.layers, &fd.delta.layers));
            }
        }
        let ok = unique && cost_err <= 1e-15 && phi_err <= 1e-9 && phi_monotone && replay_err <= 1e-12;
        Ok((
            ok,
            format!(
                "unique={unique} cost_err={cost_err:.1e} phi_err={phi_err:.1e} phi_monotone={phi_monotone} replay={replay_err:.1e}"
            ),
        ))
    });
    s.run("strategy_agnostic_plumbing", || {
        let point = ResourceDistribution::point_mass(ConfigType::Type2);
        let mut a = Federation::new(&world, small_fed(Strategy::FlexLora, point.clone()))?;
        let mut b = Federation::new(&world, small_fed(Strategy::Naive, point))?;
        let mut same = a.candidates() == b.candidates();
        for _ in 0..3 {
            let ra = a.run_round()?;
            let rb = b.run_round()?;
            same &= ra.participants == rb.participants
                && ra.participants.iter().all(|&id| a.dataset(id) == b.dataset(id));
        }
        Ok((same, "identical participants and datasets".to_string()))
    });
    s.run("naive_rejects_mixed_ranks", || {
        let mut fed = Federation::new(&world, small_fed(Strategy::Naive, ResourceDistribution::uniform()))?;
        let err = fed.run_round();
        Ok((
            matches!(err, Err(Error::HeterogeneousRanksUnsupported(_))),
            "heterogeneous profiles rejected at round start".to_string(),
        ))
    });
    s.finish()
}

fn cli_suite() -> SuiteResult {
    let mut s = Suite::new("cli");
    s.run("golden_headers", || {
        let rounds = report::rounds_csv("# h\n", &[])?;
        let spectra = report::spectra_csv("# h\n", &[])?;
        let ok = rounds == b"# h\nround,strategy,distribution,seed,train_loss,val_loss,zeroshot_loss,cost_per_round\n"
            && spectra == b"# h\nround,layer,index,sigma,error_ratio,strategy,distribution,seed\n";
        Ok((ok, "rounds.csv and spectra.csv headers".to_string()))
    });
    s.run("determinism", || {
        let world = gen_world(&small_world(12))?;
        let cfg = small_fed(Strategy::HetLora, ResourceDistribution::uniform());
        let bytes = |r: &ExperimentResult| {
            report::rounds_csv(
                "",
                &[RunRecord {
                    strategy: "hetlora",
                    distribution: "uniform",
                    seed: 0,
                    result: r,
                }],
            )
        };
        let a = bytes(&run_experiment(&world, &cfg)?)?;
        let b = bytes(&run_experiment(&world, &cfg)?)?;
        Ok((a == b, "repeated runs byte-identical".to_string()))
    });
    s.finish()
}
