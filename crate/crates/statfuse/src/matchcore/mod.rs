//! Numeric kernels of conditional-expectation matching.
//!
//! Expectation matrices are robust-scaled so every column gets roughly equal
//! weight in Euclidean distance, donor neighbor pools are trimmed to the
//! prefix length k* that best reproduces each anchor's modeled conditional
//! distribution, and recipients are matched to their single nearest anchor.
//!
//! Column convention for continuous expectation matrices: column 0 is the
//! conditional mean, columns 1..=p are the conditional quantiles in
//! percentile order.

mod kmeans;
mod knn;

pub use kmeans::{kmeans_reduce, KMeansFit};
pub use knn::{knn_search, nearest_one, KdTree, KnnMode, KnnResult};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::{mad, median, norm_quantile};

/// Default scaling epsilon.
pub const SCALE_EPSILON: f64 = 0.001;

/// Default neighbor-pool size K.
pub const DEFAULT_POOL_K: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub median: f64,
    /// Median absolute deviation, or half the IQR when the MAD degenerates.
    pub spread: f64,
    /// Constant columns are dropped from distance: they scale to 0.5 for
    /// every row and therefore contribute nothing.
    pub dropped: bool,
}

/// Per-column robust scaling fitted on an expectation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub epsilon: f64,
    /// norm_quantile(epsilon); the matching upper quantile is its negation,
    /// which keeps the scaled median at exactly 0.5.
    pub q_eps: f64,
    pub columns: Vec<ColumnScale>,
}

impl ScalingParams {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// Scale one value from column `j`.
    #[inline]
    pub fn scale_value(&self, j: usize, x: f64) -> f64 {
        let c = &self.columns[j];
        if c.dropped {
            return 0.5;
        }
        let standardized = (x - c.median) / c.spread;
        (standardized - self.q_eps) / (-2.0 * self.q_eps)
    }

    /// Exact inverse of `scale_value` for non-dropped columns; dropped
    /// columns invert to their median.
    #[inline]
    pub fn inverse_value(&self, j: usize, v: f64) -> f64 {
        let c = &self.columns[j];
        if c.dropped {
            return c.median;
        }
        c.median + c.spread * (v * (-2.0 * self.q_eps) + self.q_eps)
    }
}

/// Fit per-column medians and MADs. A zero MAD falls back to half the IQR;
/// if that is also zero the column is constant and gets dropped from
/// distance computation.
pub fn robust_scale_fit(matrix: &Matrix) -> ScalingParams {
    robust_scale_fit_eps(matrix, SCALE_EPSILON)
}

pub fn robust_scale_fit_eps(matrix: &Matrix, epsilon: f64) -> ScalingParams {
    assert!(
        epsilon > 0.0 && epsilon < 0.5,
        "epsilon must lie in (0, 0.5)"
    );
    let columns = (0..matrix.n_cols())
        .map(|j| {
            let col = matrix.column(j);
            debug_assert!(col.iter().all(|v| v.is_finite()));
            let med = median(&col);
            let mut spread = mad(&col);
            if spread == 0.0 {
                spread = 0.5 * (quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25));
            }
            let dropped = spread == 0.0;
            ColumnScale {
                median: med,
                spread: if dropped { 1.0 } else { spread },
                dropped,
            }
        })
        .collect();
    ScalingParams {
        epsilon,
        q_eps: norm_quantile(epsilon),
        columns,
    }
}

/// Apply fitted scaling to a matrix with the same column layout.
pub fn robust_scale_apply(params: &ScalingParams, matrix: &Matrix) -> Matrix {
    assert_eq!(params.n_cols(), matrix.n_cols(), "column count mismatch");
    let mut out = Matrix::zeros(matrix.n_rows(), matrix.n_cols());
    for i in 0..matrix.n_rows() {
        let row = matrix.row(i);
        let dst = out.row_mut(i);
        for (j, &x) in row.iter().enumerate() {
            dst[j] = params.scale_value(j, x);
        }
    }
    out
}

fn quantile_sorted(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let target = p * n as f64;
    let mut idx = target.ceil() as usize;
    if idx == 0 {
        idx = 1;
    }
    v[(idx - 1).min(n - 1)]
}

// ---------------------------------------------------------------------------
// Divergence and variable-k
// ---------------------------------------------------------------------------

/// Divergence of a value multiset from modeled conditional expectations.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub mean_term: f64,
    pub quantile_terms: Vec<f64>,
    pub total: f64,
    pub sigma: f64,
}

/// Spread implied by the outer conditional quantiles under a normal reading:
/// sigma = (Q_p - Q_1) / (z(P_p) - z(P_1)), floored at `sigma_floor`.
pub fn implied_sigma(q: &[f64], p: &[f64], sigma_floor: f64) -> f64 {
    assert!(q.len() >= 2 && q.len() == p.len());
    let span = norm_quantile(p[p.len() - 1]) - norm_quantile(p[0]);
    let sigma = (q[q.len() - 1] - q[0]) / span;
    if sigma <= sigma_floor {
        sigma_floor
    } else {
        sigma
    }
}

/// Divergence between the first k values of a pool and the anchor's
/// conditional mean `u` and quantiles `q` at percentiles `p`.
pub fn divergence(x: &[f64], u: f64, q: &[f64], p: &[f64], sigma_floor: f64) -> Divergence {
    assert!(!x.is_empty(), "divergence of empty multiset");
    assert_eq!(q.len(), p.len());
    assert!(p.len() >= 2, "need at least two percentiles");
    debug_assert!(p.windows(2).all(|w| w[0] < w[1]));
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    let sigma = implied_sigma(q, p, sigma_floor);
    let z = (mean - u) / sigma;
    // phi(z)/phi(0) = exp(-z^2/2)
    let mean_term = 1.0 - (-0.5 * z * z).exp();
    let mut total = mean_term;
    let quantile_terms: Vec<f64> = q
        .iter()
        .zip(p)
        .map(|(&qj, &pj)| {
            let share = x.iter().filter(|&&v| v <= qj).count() as f64 / k;
            let tau = if pj > 0.5 { pj } else { 1.0 - pj };
            let term = (share - pj).abs() / tau;
            total += term;
            term
        })
        .collect();
    Divergence {
        mean_term,
        quantile_terms,
        total,
        sigma,
    }
}

/// Pick the prefix length of `values` (ordered nearest-first) whose empirical
/// distribution diverges least from (u, q). Ties break toward smaller k.
pub fn optimal_k(values: &[f64], u: f64, q: &[f64], p: &[f64], sigma_floor: f64) -> usize {
    assert!(!values.is_empty());
    assert_eq!(q.len(), p.len());
    assert!(p.len() >= 2, "need at least two percentiles");
    let sigma = implied_sigma(q, p, sigma_floor);
    let taus: Vec<f64> = p
        .iter()
        .map(|&pj| if pj > 0.5 { pj } else { 1.0 - pj })
        .collect();

    let mut sum = 0.0;
    let mut below = vec![0usize; q.len()];
    let mut best_k = 1;
    let mut best_delta = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        for (j, &qj) in q.iter().enumerate() {
            if v <= qj {
                below[j] += 1;
            }
        }
        let k = (i + 1) as f64;
        let z = (sum / k - u) / sigma;
        let mut delta = 1.0 - (-0.5 * z * z).exp();
        for j in 0..q.len() {
            delta += (below[j] as f64 / k - p[j]).abs() / taus[j];
        }
        if delta < best_delta {
            best_delta = delta;
            best_k = i + 1;
        }
    }
    best_k
}

// ---------------------------------------------------------------------------
// Donor pools
// ---------------------------------------------------------------------------

/// One anchor's neighbor pool: observed donor Z values ordered nearest-first,
/// plus the selected prefix length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorPool {
    pub values: Vec<f64>,
    pub k_star: usize,
}

impl DonorPool {
    pub fn prefix(&self) -> &[f64] {
        &self.values[..self.k_star]
    }
}

#[derive(Debug, Clone)]
pub struct PoolBuildConfig {
    /// Neighbor count K per anchor.
    pub k: usize,
    /// Optional k-means reduction of the anchor set to r centers.
    pub reduction: Option<usize>,
    pub percentiles: Vec<f64>,
    pub sigma_floor: f64,
    /// Seed for the k-means reduction; unused without reduction.
    pub seed: u64,
}

/// Anchor matrix plus per-anchor pools; anchors are donor rows, or cluster
/// centers when reduction is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorPools {
    pub anchors_scaled: Matrix,
    pub pools: Vec<DonorPool>,
    pub k_used: usize,
    pub k_clamped: bool,
}

/// Build variable-k donor pools from the donor expectation matrix.
///
/// `db_unscaled` supplies each anchor's (u, Q); `db_scaled` drives the
/// neighbor geometry; `z` holds the observed donor values being pooled.
pub fn build_donor_pools(
    db_unscaled: &Matrix,
    db_scaled: &Matrix,
    scaling: &ScalingParams,
    z: &[f64],
    cfg: &PoolBuildConfig,
) -> Result<DonorPools> {
    let n = db_scaled.n_rows();
    if n != z.len() || n != db_unscaled.n_rows() {
        return Err(Error::InvalidArgument(
            "expectation matrix rows must align with donor values".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no donor rows".into()));
    }
    if cfg.percentiles.len() + 1 != db_unscaled.n_cols() {
        return Err(Error::InvalidArgument(format!(
            "expectation matrix has {} columns but {} percentiles were given",
            db_unscaled.n_cols(),
            cfg.percentiles.len()
        )));
    }
    let k_clamped = cfg.k > n;
    let k = cfg.k.min(n);

    let (anchors_scaled, anchors_expect): (Matrix, Matrix) = match cfg.reduction {
        None => (db_scaled.clone(), db_unscaled.clone()),
        Some(r) => {
            if r >= n {
                return Err(Error::InvalidArgument(format!(
                    "reduction r={r} must be smaller than the donor row count {n}"
                )));
            }
            let fit = kmeans_reduce(db_scaled, r, cfg.seed)?;
            let mut expect = Matrix::zeros(r, db_unscaled.n_cols());
            for i in 0..r {
                let center = fit.centers.row(i);
                let dst = expect.row_mut(i);
                for (j, &v) in center.iter().enumerate() {
                    dst[j] = scaling.inverse_value(j, v);
                }
            }
            (fit.centers, expect)
        }
    };

    let neighbors = knn_search(db_scaled, &anchors_scaled, k, KnnMode::Exact)?;
    let pools: Vec<DonorPool> = (0..anchors_scaled.n_rows())
        .into_par_iter()
        .map(|a| {
            let values: Vec<f64> = neighbors
                .neighbors(a)
                .iter()
                .map(|&ix| z[ix as usize])
                .collect();
            let row = anchors_expect.row(a);
            let u = row[0];
            let q = &row[1..];
            let k_star = optimal_k(&values, u, q, &cfg.percentiles, cfg.sigma_floor);
            DonorPool { values, k_star }
        })
        .collect();

    Ok(DonorPools {
        anchors_scaled,
        pools,
        k_used: k,
        k_clamped,
    })
}

/// Floor for the implied sigma: a small fraction of the full-sample spread of
/// the fused variable, or 1 when that spread is itself zero.
pub fn sigma_floor_for(z: &[f64]) -> f64 {
    let spread = mad(z);
    if spread > 0.0 {
        1e-6 * spread
    } else {
        1e-6
    }
}
