//! LoRA adapters: the trainable `s·B·A` delta attached to a frozen layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{matmul, svd, Matrix, SvdFactors};

/// Output and input width of one linear layer (`W` is `out_dim x in_dim`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LayerShape {
    pub fn new(out_dim: usize, in_dim: usize) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer shape {out_dim}x{in_dim} must be positive"
            )));
        }
        Ok(Self { out_dim, in_dim })
    }

    pub fn max_rank(&self) -> usize {
        self.out_dim.min(self.in_dim)
    }

    pub fn base_params(&self) -> usize {
        self.out_dim * self.in_dim
    }

    /// Trainable parameters of a rank-`r` adapter on this layer.
    pub fn adapter_params(&self, rank: usize) -> usize {
        rank * (self.out_dim + self.in_dim)
    }

    pub fn check_rank(&self, rank: usize) -> Result<()> {
        if rank == 0 || rank > self.max_rank() {
            return Err(Error::RankOutOfRange {
                rank,
                max: self.max_rank(),
            });
        }
        Ok(())
    }
}

/// `up` is `d x r` (B), `down` is `r x p` (A); the delta is `scaling · up · down`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    up: Matrix,
    down: Matrix,
    scaling: f64,
}

impl LoraAdapter {
    pub fn new(up: Matrix, down: Matrix, scaling: f64) -> Result<Self> {
        if up.cols() != down.rows() {
            return Err(Error::InvalidAdapter(format!(
                "up has {} columns but down has {} rows",
                up.cols(),
                down.rows()
            )));
        }
        if !(scaling > 0.0 && scaling.is_finite()) {
            return Err(Error::InvalidAdapter(format!("scaling {scaling} must be positive")));
        }
        let rank = up.cols();
        let max = up.rows().min(down.cols());
        if rank > max {
            return Err(Error::RankOutOfRange { rank, max });
        }
        Ok(Self { up, down, scaling })
    }

    /// Zero-delta start: `B = 0`, `A ~ N(0, 1/r)`.
    pub fn init<R: Rng + ?Sized>(
        shape: LayerShape,
        rank: usize,
        scaling: f64,
        rng: &mut R,
    ) -> Result<Self> {
        shape.check_rank(rank)?;
        let down = Matrix::gaussian(rank, shape.in_dim, (1.0 / rank as f64).sqrt(), rng);
        Self::new(Matrix::zeros(shape.out_dim, rank), down, scaling)
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn rank(&self) -> usize {
        self.up.cols()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            out_dim: self.up.rows(),
            in_dim: self.down.cols(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().adapter_params(self.rank())
    }

    pub fn up_mut(&mut self) -> &mut Matrix {
        &mut self.up
    }

    pub fn down_mut(&mut self) -> &mut Matrix {
        &mut self.down
    }

    /// Leading `r` columns of `up` and rows of `down`.
    pub fn leading(&self, r: usize) -> Result<LoraAdapter> {
        if r == 0 || r > self.rank() {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: self.rank(),
            });
        }
        Self::new(self.up.first_cols(r), self.down.first_rows(r), self.scaling)
    }

    /// Zero-pads `up` columns and `down` rows out to `r`.
    pub fn padded(&self, r: usize) -> Result<LoraAdapter> {
        let shape = self.shape();
        if r < self.rank() {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: self.rank(),
            });
        }
        shape.check_rank(r)?;
        Self::new(
            self.up.padded(shape.out_dim, r),
            self.down.padded(r, shape.in_dim),
            self.scaling,
        )
    }
}

/// `s · B · A`.
pub fn compose(a: &LoraAdapter) -> Matrix {
    let mut ba = matmul(&a.up, &a.down).expect("adapter invariant: inner dimensions agree");
    if a.scaling != 1.0 {
        ba.as_mut_slice().iter_mut().for_each(|x| *x *= a.scaling);
    }
    ba
}

/// Rank-`r` adapter whose composition is the best rank-`r` approximation of
/// `w_g`: `B = U[:, :r] Σ[:r] / s`, `A = V[:, :r]ᵀ`.
pub fn decompose(w_g: &Matrix, r: usize, s: f64) -> Result<LoraAdapter> {
    let factors = svd(w_g)?;
    from_factors(&factors, r, s)
}

/// Same as [`decompose`] but reuses an existing factorization.
pub fn from_factors(f: &SvdFactors, r: usize, s: f64) -> Result<LoraAdapter> {
    from_factors_with(f, r, s, false)
}

/// `flip_sign` negates the redistributed `B`; only the invariant runner's
/// fault-injection mode sets it.
pub(crate) fn from_factors_with(
    f: &SvdFactors,
    r: usize,
    s: f64,
    flip_sign: bool,
) -> Result<LoraAdapter> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidAdapter(format!("scaling {s} must be positive")));
    }
    let mut up = f.scaled_left(r)?;
    let factor = if flip_sign { -1.0 / s } else { 1.0 / s };
    up.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
    LoraAdapter::new(up, f.right_rows(r)?, s)
}
