//! PCA whitening with dimensionality reduction, fit once and then frozen.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};

pub const WHITENED_DIM: usize = 128;

/// `o(x) = (x - mean) · projectionᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Array1<f64>,
    /// `out x in`; row `k` is the `k`-th principal axis scaled by `1/sqrt(λ_k)`.
    pub projection: Mat,
}

impl WhiteningTransform {
    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Plain linear map with the given `out x in` projection and zero mean.
    pub fn linear(projection: Mat) -> Self {
        let n = projection.ncols();
        Self {
            mean: Array1::zeros(n),
            projection,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(Array2::eye(dim))
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let centered = x - &self.mean.view().insert_axis(Axis(0));
        centered.dot(&self.projection.t())
    }

    pub fn apply_graph(&self, g: &mut Graph, x: Var) -> Var {
        let neg_mean = g.constant((-&self.mean).insert_axis(Axis(0)));
        let centered = g.add_row(x, neg_mean);
        let proj = g.constant(self.projection.t().to_owned());
        g.matmul(centered, proj)
    }
}

/// Relative eigenvalue floor below which a direction counts as absent.
const RANK_TOLERANCE: f64 = 1e-10;

/// Fits PCA-whitening to `out_dim` dimensions on the rows of `samples`.
///
/// Eigenvector signs are fixed so that each axis' largest-magnitude
/// component is positive, making refits reproducible.
pub fn fit_whitening(samples: &Mat, out_dim: usize) -> Result<WhiteningTransform> {
    let (m, d) = samples.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::invalid(format!(
            "cannot whiten {d}-dim features to {out_dim} dims"
        )));
    }
    if m < 2 {
        return Err(Error::RankDeficient {
            rank: 0,
            required: out_dim,
        });
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty sample");
    let centered = samples - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOLERANCE * top && eig.eigenvalues[i] > 0.0)
        .count();
    if rank < out_dim {
        return Err(Error::RankDeficient {
            rank,
            required: out_dim,
        });
    }
    let mut projection = Array2::zeros((out_dim, d));
    for (k, &idx) in order.iter().take(out_dim).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / eig.eigenvalues[idx].sqrt();
        for j in 0..d {
            projection[[k, j]] = col[j] * scale;
        }
    }
    let transform = WhiteningTransform { mean, projection };
    let whitened = transform.apply(samples);
    let wcov = whitened.t().dot(&whitened) / (m as f64 - 1.0);
    let err = frobenius_from_identity(&wcov);
    if err > 1e-4 * out_dim as f64 {
        log::warn!("whitened covariance deviates from identity by {err:.3e}");
    }
    Ok(transform)
}

pub fn frobenius_from_identity(cov: &Mat) -> f64 {
    cov.indexed_iter()
        .map(|((i, j), v)| {
            let t = if i == j { 1.0 } else { 0.0 };
            (v - t) * (v - t)
        })
        .sum::<f64>()
        .sqrt()
}
