//! Toy network standing in for a frozen foundation model: linear layers with
//! `tanh` between them, each layer optionally carrying a LoRA adapter.
//! Gradients are hand-derived; only adapter factors are trainable.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{LayerShape, LoraAdapter};
use crate::error::{Error, Result};
use crate::lowrank::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::seed;

/// Frozen base weights, one `out x in` matrix per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBase {
    layers: Vec<Matrix>,
}

impl FrozenBase {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].rows() != pair[1].cols() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].rows(),
                    l + 1,
                    pair[1].cols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|m| LayerShape {
                out_dim: m.rows(),
                in_dim: m.cols(),
            })
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.base_params()).sum()
    }
}

/// Rows are samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let gather = |m: &Matrix| {
            Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)])
        };
        Ok(Batch {
            inputs: gather(&self.inputs),
            targets: gather(&self.targets),
        })
    }

    /// Concatenates batches row-wise.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let (pi, pt) = (first.inputs.cols(), first.targets.cols());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for b in parts {
            if b.inputs.cols() != pi || b.targets.cols() != pt {
                return Err(Error::ShapeMismatch("batch widths differ".into()));
            }
            xs.extend_from_slice(b.inputs.as_slice());
            ys.extend_from_slice(b.targets.as_slice());
        }
        let n = xs.len() / pi;
        Batch::new(Matrix::from_vec(n, pi, xs)?, Matrix::from_vec(n, pt, ys)?)
    }
}

/// A frozen base plus per-layer optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub base: Arc<FrozenBase>,
    pub adapters: Vec<Option<LoraAdapter>>,
}

/// Gradient of the loss with respect to one adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub up: Matrix,
    pub down: Matrix,
}

impl ToyModel {
    pub fn new(base: Arc<FrozenBase>, adapters: Vec<Option<LoraAdapter>>) -> Result<Self> {
        let shapes = base.shapes();
        if adapters.len() != shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} adapters for {} layers",
                adapters.len(),
                shapes.len()
            )));
        }
        for (l, (a, s)) in adapters.iter().zip(&shapes).enumerate() {
            if let Some(a) = a {
                if a.shape() != *s {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {l} adapter {:?} on base {:?}",
                        a.shape(),
                        s
                    )));
                }
            }
        }
        Ok(Self { base, adapters })
    }

    pub fn bare(base: Arc<FrozenBase>) -> Self {
        let n = base.layers().len();
        Self {
            base,
            adapters: vec![None; n],
        }
    }

    /// `W0 + s·B·A` for every layer.
    pub fn effective_weights(&self) -> Vec<Matrix> {
        self.base
            .layers()
            .iter()
            .zip(&self.adapters)
            .map(|(w0, a)| match a {
                None => w0.clone(),
                Some(a) => {
                    let mut w = w0.clone();
                    let ba = matmul(a.up(), a.down()).expect("adapter shape checked");
                    w.axpy(a.scaling(), &ba).expect("adapter shape checked");
                    w
                }
            })
            .collect()
    }

    fn adapter_sq_norm(&self) -> f64 {
        self.adapters
            .iter()
            .flatten()
            .map(|a| a.up().sum_squares() + a.down().sum_squares())
            .sum()
    }
}

/// Forward pass through explicit effective weights.
pub fn forward_weights(weights: &[Matrix], inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_trace(weights, inputs)?.pop().expect("at least one layer"))
}

/// Layer inputs `z_0 .. z_{L-1}` followed by the output.
fn forward_trace(weights: &[Matrix], inputs: &Matrix) -> Result<Vec<Matrix>> {
    if inputs.cols() != weights[0].cols() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} but first layer expects {}",
            inputs.cols(),
            weights[0].cols()
        )));
    }
    let mut trace = vec![inputs.clone()];
    for (l, w) in weights.iter().enumerate() {
        let h = matmul_nt(trace.last().expect("non-empty"), w)?;
        trace.push(if l + 1 < weights.len() { h.map(f64::tanh) } else { h });
    }
    Ok(trace)
}

pub fn forward(model: &ToyModel, inputs: &Matrix) -> Result<Matrix> {
    forward_weights(&model.effective_weights(), inputs)
}

/// Mean over samples of `½‖prediction − target‖²`.
pub fn mse_of(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    if predictions.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let sq: f64 = predictions
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(0.5 * sq / predictions.rows() as f64)
}

/// Data loss plus `l2_penalty · Σ‖adapter entries‖²`.
pub fn loss(model: &ToyModel, batch: &Batch, l2_penalty: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pred = forward(model, &batch.inputs)?;
    let data = mse_of(&pred, &batch.targets)?;
    Ok(if l2_penalty > 0.0 {
        data + l2_penalty * model.adapter_sq_norm()
    } else {
        data
    })
}

/// Exact gradients of [`loss`] with respect to every adapter's `up` and
/// `down`; `None` for layers without an adapter.
pub fn grads(model: &ToyModel, batch: &Batch, l2_penalty: f64) -> Result<Vec<Option<AdapterGrad>>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let weights = model.effective_weights();
    let trace = forward_trace(&weights, &batch.inputs)?;
    let out = &trace[weights.len()];
    if out.shape() != batch.targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "output {:?} vs targets {:?}",
            out.shape(),
            batch.targets.shape()
        )));
    }
    let n = batch.len() as f64;
    let mut delta = out.sub(&batch.targets)?.map(|x| x / n);
    let mut result = vec![None; weights.len()];
    for l in (0..weights.len()).rev() {
        let z_in = &trace[l];
        if let Some(a) = &model.adapters[l] {
            // dL/dW = δᵀ z_in, then chain through W = W0 + s·B·A.
            let gw = matmul_tn(&delta, z_in)?;
            let s = a.scaling();
            let mut up = matmul_nt(&gw, a.down())?.map(|x| s * x);
            let mut down = matmul_tn(a.up(), &gw)?.map(|x| s * x);
            if l2_penalty > 0.0 {
                up.axpy(2.0 * l2_penalty, a.up())?;
                down.axpy(2.0 * l2_penalty, a.down())?;
            }
            result[l] = Some(AdapterGrad { up, down });
        }
        if l > 0 {
            let back = matmul(&delta, &weights[l])?;
            // z_in = tanh(h) here, so tanh'(h) = 1 − z_in².
            delta = Matrix::from_fn(back.rows(), back.cols(), |i, j| {
                let z = z_in[(i, j)];
                back[(i, j)] * (1.0 - z * z)
            });
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain SGD (FedAvg-style local training).
    Sgd,
    /// Adam (FedIT-style local training).
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_adapter_penalty: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd(0.05)
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 1,
            batch_size: 4,
            l2_adapter_penalty: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it freezes the adapters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.l2_adapter_penalty >= 0.0) {
            return Err(Error::InvalidConfig("l2 penalty must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub adapters: Vec<Option<LoraAdapter>>,
    /// Data loss on the full training set after the last step.
    pub train_loss: f64,
    pub steps: usize,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn apply_update(
    param: &mut Matrix,
    grad: &Matrix,
    opt: &OptimizerConfig,
    state: Option<&mut AdamState>,
    step: usize,
) {
    let lr = opt.learning_rate;
    match state {
        None => {
            for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *p -= lr * g;
            }
        }
        Some(st) => {
            let bc1 = 1.0 - opt.beta1.powi(step as i32);
            let bc2 = 1.0 - opt.beta2.powi(step as i32);
            for (((p, g), m), v) in param
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
            }
        }
    }
}

/// Trains the adapters on `train` for `epochs` passes of seeded shuffled
/// minibatches. Adam moments start at zero on every call. The base is never
/// touched.
pub fn local_update(
    base: &Arc<FrozenBase>,
    adapters: Vec<Option<LoraAdapter>>,
    train: &Batch,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<LocalOutcome> {
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut model = ToyModel::new(Arc::clone(base), adapters)?;
    let mut rng = seed::rng(seed, &[seed::TAG_LOCAL]);
    let mut adam: Vec<Option<(AdamState, AdamState)>> = model
        .adapters
        .iter()
        .map(|a| {
            a.as_ref().filter(|_| opt.kind == OptimizerKind::Adam).map(|a| {
                (
                    AdamState::zeros(a.up().as_slice().len()),
                    AdamState::zeros(a.down().as_slice().len()),
                )
            })
        })
        .collect();

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    for _ in 0..opt.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            let mb = train.select(chunk)?;
            let g = grads(&model, &mb, opt.l2_adapter_penalty)?;
            steps += 1;
            for ((slot, grad), st) in model.adapters.iter_mut().zip(g).zip(adam.iter_mut()) {
                if let (Some(a), Some(grad)) = (slot.as_mut(), grad) {
                    let (su, sd) = match st {
                        Some((u, d)) => (Some(u), Some(d)),
                        None => (None, None),
                    };
                    apply_update(a.up_mut(), &grad.up, opt, su, steps);
                    apply_update(a.down_mut(), &grad.down, opt, sd, steps);
                }
            }
        }
    }
    let train_loss = loss(&model, train, 0.0)?;
    if !train_loss.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "local training diverged (loss {train_loss}); lower the learning rate"
        )));
    }
    Ok(LocalOutcome {
        adapters: model.adapters,
        train_loss,
        steps,
    })
}
