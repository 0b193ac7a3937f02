//! Reference implementations shared by the integration tests. Everything
//! here is deliberately naive: plain loops over row-major data.

#![allow(dead_code)]

use std::sync::Arc;

use flexlora::adapter::LoraAdapter;
use flexlora::lowrank::Matrix;
use flexlora::model::{grads, Batch, FrozenBase, ToyModel};
use flexlora::seed;

pub fn gaussian(rows: usize, cols: usize, seed_value: u64) -> Matrix {
    let mut rng = seed::rng(seed_value, &[0x7e57]);
    Matrix::gaussian(rows, cols, 1.0, &mut rng)
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.cols(), a.rows(), |i, j| a[(j, i)])
}

pub fn fro(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn fro_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    fro_diff(a, b) / fro(b).max(1e-300)
}

/// `n x k` matrix with orthonormal columns from modified Gram–Schmidt on a
/// seeded Gaussian draw.
pub fn orthonormal(n: usize, k: usize, seed_value: u64) -> Matrix {
    let g = gaussian(n, k, seed_value);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
        for _ in 0..2 {
            for q in &cols {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// `U diag(sigma) Vᵀ` with random orthonormal factors.
pub fn with_spectrum(d: usize, p: usize, sigma: &[f64], seed_value: u64) -> Matrix {
    let k = sigma.len();
    let u = orthonormal(d, k, seed_value);
    let v = orthonormal(p, k, seed_value ^ 0xabcd);
    let us = Matrix::from_fn(d, k, |i, j| u[(i, j)] * sigma[j]);
    naive_matmul(&us, &naive_transpose(&v))
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted in descending order.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

/// Loss of a tanh MLP evaluated with scalar loops: mean over samples of
/// `½‖f(x) − y‖²` with `f` applying `tanh` after every layer but the last.
pub fn scalar_loss(weights: &[Matrix], inputs: &Matrix, targets: &Matrix) -> f64 {
    let mut total = 0.0;
    for s in 0..inputs.rows() {
        let mut z: Vec<f64> = inputs.row(s).to_vec();
        for (l, w) in weights.iter().enumerate() {
            let mut h = vec![0.0; w.rows()];
            for (i, hi) in h.iter_mut().enumerate() {
                for (j, zj) in z.iter().enumerate() {
                    *hi += w[(i, j)] * zj;
                }
            }
            z = if l + 1 < weights.len() { h.iter().map(|x| x.tanh()).collect() } else { h };
        }
        total += 0.5 * z.iter().zip(targets.row(s)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / inputs.rows() as f64
}

/// Seeded model with 2 or 3 layers of width at most 16 and adapters of rank
/// at most 4 on every layer.
pub fn seeded_model(seed: u64) -> (ToyModel, Batch) {
    let depth = 2 + (seed % 2) as usize;
    let dims: Vec<usize> = (0..=depth).map(|l| 3 + ((seed as usize * 7 + l * 5) % 14)).collect();
    let layers: Vec<Matrix> = (0..depth)
        .map(|l| gaussian(dims[l + 1], dims[l], seed * 31 + l as u64).map(|x| x / (dims[l] as f64).sqrt()))
        .collect();
    let adapters = (0..depth)
        .map(|l| {
            let r = (1 + (seed as usize + l) % 4).min(dims[l]).min(dims[l + 1]);
            let up = gaussian(dims[l + 1], r, seed * 37 + l as u64).map(|x| 0.3 * x);
            let down = gaussian(r, dims[l], seed * 41 + l as u64).map(|x| 0.3 * x);
            Some(LoraAdapter::new(up, down, 1.0 + (seed % 3) as f64).unwrap())
        })
        .collect();
    let base = Arc::new(FrozenBase::new(layers).unwrap());
    let model = ToyModel::new(base, adapters).unwrap();
    let batch = Batch::new(gaussian(6, dims[0], seed * 43), gaussian(6, dims[depth], seed * 47)).unwrap();
    (model, batch)
}

pub fn weights_of(m: &ToyModel) -> Vec<Matrix> {
    m.base
        .layers()
        .iter()
        .zip(&m.adapters)
        .map(|(w0, a)| match a {
            None => w0.clone(),
            Some(a) => {
                let ba = naive_matmul(a.up(), a.down());
                Matrix::from_fn(w0.rows(), w0.cols(), |i, j| w0[(i, j)] + a.scaling() * ba[(i, j)])
            }
        })
        .collect()
}

/// Largest relative error between analytic adapter gradients and central
/// differences of [`scalar_loss`] with step `1e-5`, over every parameter of
/// `seeded_model(seed)`. The denominator is floored at `1e-3`.
pub fn gradient_error(seed: u64) -> f64 {
    const H: f64 = 1e-5;
    let (m, b) = seeded_model(seed);
    let g = grads(&m, &b, 0.0).unwrap();
    let mut worst: f64 = 0.0;
    for (l, gl) in g.iter().enumerate() {
        let gl = gl.as_ref().unwrap();
        for (which, exact) in [(0, &gl.up), (1, &gl.down)] {
            for k in 0..exact.as_slice().len() {
                let eval = |delta: f64| {
                    let mut p = m.clone();
                    let a = p.adapters[l].as_mut().unwrap();
                    let t = if which == 0 { a.up_mut() } else { a.down_mut() };
                    t.as_mut_slice()[k] += delta;
                    scalar_loss(&weights_of(&p), &b.inputs, &b.targets)
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let e = exact.as_slice()[k];
                worst = worst.max((e - numeric).abs() / e.abs().max(numeric.abs()).max(1e-3));
            }
        }
    }
    worst
}
