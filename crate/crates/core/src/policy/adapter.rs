//! Low-rank additive adapters: `W_eff = W + (alpha / r) · B · A`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Configuration("adapter rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Configuration(format!(
                "adapter dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// A standalone adapter for one weight matrix of shape `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// `rank × d_in`
    pub a: Matrix,
    /// `d_out × rank`, zero at construction.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_rate: f64,
}

impl LowRankAdapter {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let a = (0..config.rank * d_in).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(LowRankAdapter {
            a: Matrix::from_vec(config.rank, d_in, a),
            b: Matrix::zeros(d_out, config.rank),
            rank: config.rank,
            alpha: config.alpha,
            dropout_rate: config.dropout,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Returns `base + scale · B · A`. In training mode, each input column of
/// the adapter path is dropped with the adapter's dropout rate and the
/// survivors rescaled by `1 / (1 - rate)`; the base path is untouched.
pub fn apply_adapter<R: Rng>(base: &Matrix, adapter: &LowRankAdapter, train_mode: bool, rng: &mut R) -> Result<Matrix> {
    let (rows, cols, r) = (base.rows, base.cols, adapter.rank);
    if adapter.a.rows != r || adapter.a.cols != cols || adapter.b.rows != rows || adapter.b.cols != r {
        return Err(Error::Input(format!(
            "adapter shapes A {}x{}, B {}x{} do not fit base {}x{} at rank {}",
            adapter.a.rows, adapter.a.cols, adapter.b.rows, adapter.b.cols, rows, cols, r
        )));
    }
    let col_scale: Vec<f64> = if train_mode && adapter.dropout_rate > 0.0 {
        let keep = 1.0 / (1.0 - adapter.dropout_rate);
        (0..cols)
            .map(|_| {
                if rng.gen::<f64>() < adapter.dropout_rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    } else {
        vec![1.0; cols]
    };
    let mut out = vec![0.0; rows * cols];
    effective_weight_into(
        &base.data,
        &adapter.a.data,
        &adapter.b.data,
        rows,
        cols,
        r,
        adapter.scale(),
        &col_scale,
        &mut out,
    );
    Ok(Matrix::from_vec(rows, cols, out))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn effective_weight_into(
    base: &[f64],
    a: &[f64],
    b: &[f64],
    rows: usize,
    cols: usize,
    rank: usize,
    scale: f64,
    col_scale: &[f64],
    out: &mut [f64],
) {
    out.copy_from_slice(base);
    for o in 0..rows {
        let orow = &mut out[o * cols..(o + 1) * cols];
        for k in 0..rank {
            let coef = scale * b[o * rank + k];
            if coef == 0.0 {
                continue;
            }
            let arow = &a[k * cols..(k + 1) * cols];
            for i in 0..cols {
                orow[i] += coef * arow[i] * col_scale[i];
            }
        }
    }
}
