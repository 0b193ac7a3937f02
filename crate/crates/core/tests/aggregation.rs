mod common;

use common::*;
use flexlora::adapter::{compose, decompose, LoraAdapter};
use flexlora::aggregate::{
    aggregate_flexlora, aggregate_hetlora, aggregate_naive, aggregation_weights, hetlora_distribute,
    hetlora_prune, hetlora_pruned_rank, redistribute, ClientId, Contribution,
};
use flexlora::lowrank::{svd, truncate, truncation_error, Matrix};
use flexlora::Error;
use proptest::prelude::*;

fn adapter(d: usize, p: usize, r: usize, s: f64, seed: u64) -> LoraAdapter {
    LoraAdapter::new(gaussian(d, r, seed), gaussian(r, p, seed ^ 0x55), s).unwrap()
}

fn contrib(id: u32, n: usize, adapters: Vec<LoraAdapter>) -> Contribution {
    Contribution {
        client_id: ClientId(id),
        adapters,
        sample_count: n,
    }
}

#[test]
fn compose_matches_triple_loop() {
    let a = adapter(16, 16, 4, 2.0, 1);
    let expected = naive_matmul(a.up(), a.down()).map(|x| 2.0 * x);
    assert!(rel_diff(&compose(&a), &expected) < 1e-14);
}

#[test]
fn compose_small_literal() {
    let up = Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap();
    let down = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
    let a = LoraAdapter::new(up, down, 2.0).unwrap();
    assert_eq!(compose(&a), Matrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]).unwrap());
}

#[test]
fn decompose_recovers_exact_low_rank_delta_for_any_scaling() {
    let w = naive_matmul(&gaussian(12, 2, 3), &gaussian(2, 10, 4));
    for s in [0.5, 1.0, 16.0] {
        let a = decompose(&w, 2, s).unwrap();
        assert_eq!(a.rank(), 2);
        assert_eq!(a.scaling(), s);
        assert!(rel_diff(&compose(&a), &w) <= 1e-12, "s={s}");
    }
}

#[test]
fn decompose_of_generic_delta_leaves_tail_residual() {
    let w = gaussian(32, 32, 8);
    let f = svd(&w).unwrap();
    let a = decompose(&w, 5, 16.0).unwrap();
    let residual = fro_diff(&w, &compose(&a));
    let tail = f.sigma[5..].iter().map(|s| s * s).sum::<f64>().sqrt();
    assert!((residual - tail).abs() / tail <= 1e-10);
    assert!(rel_diff(&compose(&a), &truncate(&f, 5).unwrap()) <= 1e-10);
}

#[test]
fn flexlora_matches_materialize_and_average() {
    let ranks = [1, 2, 4];
    let counts = [10, 20, 30];
    let contribs: Vec<Contribution> = (0..3)
        .map(|i| {
            contrib(
                i as u32,
                counts[i],
                vec![adapter(8, 6, ranks[i], 1.5, i as u64), adapter(4, 8, ranks[i], 1.5, 10 + i as u64)],
            )
        })
        .collect();
    let global = aggregate_flexlora(&contribs).unwrap();
    for l in 0..2 {
        let mut expected = Matrix::zeros(global.layers[l].rows(), global.layers[l].cols());
        for (c, n) in contribs.iter().zip(counts) {
            let delta = naive_matmul(c.adapters[l].up(), c.adapters[l].down());
            for (e, x) in expected.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *e += (n as f64 / 60.0) * 1.5 * x;
            }
        }
        assert!(rel_diff(&global.layers[l], &expected) <= 1e-12);
    }
}

#[test]
fn aggregation_weights_are_sample_fractions() {
    let contribs = vec![
        contrib(7, 30, vec![adapter(3, 3, 1, 1.0, 1)]),
        contrib(2, 10, vec![adapter(3, 3, 1, 1.0, 2)]),
    ];
    let w = aggregation_weights(&contribs).unwrap();
    assert_eq!(w, vec![(ClientId(2), 0.25), (ClientId(7), 0.75)]);
}

#[test]
fn redistribution_budgets() {
    let w = naive_matmul(&gaussian(6, 2, 1), &gaussian(2, 6, 2));
    let delta = flexlora::aggregate::GlobalDelta { layers: vec![w.clone()] };
    let out = redistribute(&delta, &[vec![2], vec![5], vec![6]], 1.0).unwrap();
    assert!(rel_diff(&compose(&out[0][0]), &w) <= 1e-12);
    assert_eq!(out[1][0].rank(), 5);
    assert!(rel_diff(&compose(&out[1][0]), &w) <= 1e-12);
    assert!(rel_diff(&compose(&out[2][0]), &w) <= 1e-12);

    let g = gaussian(7, 9, 3);
    let f = svd(&g).unwrap();
    let delta = flexlora::aggregate::GlobalDelta { layers: vec![g.clone()] };
    let out = redistribute(&delta, &[vec![1], vec![3]], 4.0).unwrap();
    for (a, r) in out.iter().zip([1, 3]) {
        let residual = fro_diff(&g, &compose(&a[0]));
        let phi = truncation_error(&f, r).unwrap();
        assert!((residual - phi).abs() / phi <= 1e-10);
    }
}

#[test]
fn naive_average_is_elementwise() {
    let a = adapter(4, 5, 2, 1.0, 1);
    let b = adapter(4, 5, 2, 1.0, 2);
    let out = aggregate_naive(&[contrib(0, 10, vec![a.clone()]), contrib(1, 30, vec![b.clone()])]).unwrap();
    let up = Matrix::from_fn(4, 2, |i, j| 0.25 * a.up()[(i, j)] + 0.75 * b.up()[(i, j)]);
    let down = Matrix::from_fn(2, 5, |i, j| 0.25 * a.down()[(i, j)] + 0.75 * b.down()[(i, j)]);
    assert!(fro_diff(out[0].up(), &up) < 1e-14);
    assert!(fro_diff(out[0].down(), &down) < 1e-14);
}

#[test]
fn naive_single_client_and_cancellation() {
    let a = adapter(4, 4, 2, 1.0, 1);
    let single = aggregate_naive(&[contrib(0, 13, vec![a.clone()])]).unwrap();
    assert!(fro_diff(single[0].up(), a.up()) < 1e-15);
    let neg = LoraAdapter::new(a.up().map(|x| -x), a.down().map(|x| -x), 1.0).unwrap();
    let out = aggregate_naive(&[contrib(0, 5, vec![a.clone()]), contrib(1, 5, vec![neg])]).unwrap();
    assert!(out[0].up().max_abs() < 1e-15);
    assert!(out[0].down().max_abs() < 1e-15);
}

#[test]
fn naive_rejects_mixed_ranks() {
    let err = aggregate_naive(&[
        contrib(0, 5, vec![adapter(4, 4, 1, 1.0, 1)]),
        contrib(1, 5, vec![adapter(4, 4, 2, 1.0, 2)]),
    ])
    .unwrap_err();
    assert!(matches!(err, Error::HeterogeneousRanksUnsupported(_)));
}

#[test]
fn hetlora_pads_then_averages() {
    let a = adapter(4, 5, 1, 1.0, 1);
    let b = adapter(4, 5, 2, 1.0, 2);
    let out = aggregate_hetlora(&[contrib(0, 10, vec![a.clone()]), contrib(1, 10, vec![b.clone()])]).unwrap();
    assert_eq!(out[0].rank(), 2);
    let up = Matrix::from_fn(4, 2, |i, j| {
        let pa = if j < 1 { a.up()[(i, j)] } else { 0.0 };
        0.5 * (pa + b.up()[(i, j)])
    });
    assert!(fro_diff(out[0].up(), &up) < 1e-15);
    // The second column only has the rank-2 client's half weight.
    for i in 0..4 {
        assert!((out[0].up()[(i, 1)] - 0.5 * b.up()[(i, 1)]).abs() < 1e-15);
    }
    let sliced = hetlora_distribute(&out, &[1]).unwrap();
    assert_eq!(sliced[0].rank(), 1);
}

#[test]
fn hetlora_equal_ranks_equals_naive() {
    let cs = vec![
        contrib(0, 10, vec![adapter(5, 5, 3, 1.0, 1)]),
        contrib(1, 20, vec![adapter(5, 5, 3, 1.0, 2)]),
    ];
    assert_eq!(aggregate_hetlora(&cs).unwrap(), aggregate_naive(&cs).unwrap());
}

#[test]
fn prune_behaviour() {
    let a = adapter(8, 8, 4, 1.0, 3);
    assert_eq!(hetlora_prune(&a, 1.0).unwrap(), a);
    let rank_one = LoraAdapter::new(gaussian(8, 1, 1).padded(8, 4), gaussian(1, 8, 2).padded(4, 8), 1.0).unwrap();
    assert_eq!(hetlora_pruned_rank(&rank_one, 0.99).unwrap(), 1);
    assert_eq!(hetlora_prune(&rank_one, 0.99).unwrap().rank(), 1);
    assert!(hetlora_prune(&a, 0.0).is_err());
    assert!(hetlora_prune(&a, 1.5).is_err());
}

#[test]
fn prune_matches_brute_force_scan() {
    let sigma = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125];
    let w = with_spectrum(8, 8, &sigma, 4);
    let a = decompose(&w, 6, 1.0).unwrap();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    for decay in [0.5, 0.8, 0.95, 0.99, 0.999] {
        let mut expected = 6;
        for r in 1..=6 {
            let kept: f64 = sigma[..r].iter().map(|s| s * s).sum();
            if kept >= decay * total - 1e-12 {
                expected = r;
                break;
            }
        }
        assert_eq!(hetlora_pruned_rank(&a, decay).unwrap(), expected, "decay {decay}");
    }
}

#[test]
fn empty_contributions_are_rejected() {
    assert!(matches!(aggregate_flexlora(&[]), Err(Error::NoContributions)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregation_is_order_invariant(seed in any::<u64>(), n in 2usize..6, shift in 0usize..5) {
        let contribs: Vec<Contribution> = (0..n)
            .map(|i| contrib(i as u32, 5 + 7 * i, vec![adapter(6, 5, 1 + i % 3, 1.0, seed.wrapping_add(i as u64))]))
            .collect();
        let mut rotated = contribs.clone();
        rotated.rotate_left(shift % n);
        rotated.reverse();
        let a = aggregate_flexlora(&contribs).unwrap();
        let b = aggregate_flexlora(&rotated).unwrap();
        prop_assert!(fro_diff(&a.layers[0], &b.layers[0]) <= 1e-12 * fro(&a.layers[0]).max(1.0));
        let wa = aggregation_weights(&contribs).unwrap();
        let total: f64 = wa.iter().map(|(_, w)| w).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert_eq!(wa, aggregation_weights(&rotated).unwrap());
    }

    #[test]
    fn flexlora_is_linear_in_identical_deltas(seed in any::<u64>(), n in 1usize..5) {
        let a = adapter(5, 7, 2, 2.0, seed);
        let contribs: Vec<Contribution> = (0..n).map(|i| contrib(i as u32, 3 + i, vec![a.clone()])).collect();
        let g = aggregate_flexlora(&contribs).unwrap();
        prop_assert!(rel_diff(&g.layers[0], &compose(&a)) <= 1e-12);
    }

    #[test]
    fn roundtrip_is_best_rank_r(d in 2usize..14, p in 2usize..14, r in 1usize..6, s in 0.25f64..8.0, seed in any::<u64>()) {
        let r = r.min(d).min(p);
        let w = gaussian(d, p, seed);
        let f = svd(&w).unwrap();
        let a = decompose(&w, r, s).unwrap();
        prop_assert!(a.rank() <= r);
        prop_assert!(rel_diff(&compose(&a), &truncate(&f, r).unwrap()) <= 1e-10);
    }
}
