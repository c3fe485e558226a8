//! Lloyd's k-means with k-means++ seeding, used to reduce large donor
//! expectation matrices to a manageable set of anchor centers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::rng::SplitMix64;

const MAX_ITER: usize = 25;
const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub n_iter: usize,
}

/// Reduce the rows of `points` to `r` cluster centers.
pub fn kmeans_reduce(points: &Matrix, r: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.n_rows();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!(
            "r = {r} out of range for {n} rows"
        )));
    }
    let mut rng = SplitMix64::for_draw(seed, 0, 0, 0x6b6d);
    let mut centers = plus_plus_init(points, r, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    let mut n_iter = 0;

    for iter in 0..MAX_ITER {
        n_iter = iter + 1;
        // Assignment step.
        let assign: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = points.row(i);
                let mut best = (0usize, f64::INFINITY);
                for c in 0..r {
                    let d2 = sq_dist(centers.row(c), row);
                    if d2 < best.1 {
                        best = (c, d2);
                    }
                }
                best
            })
            .collect();
        let new_inertia: f64 = assign.iter().map(|&(_, d2)| d2).sum();
        for (i, &(c, _)) in assign.iter().enumerate() {
            assignments[i] = c;
        }

        // Update step.
        let mut sums = Matrix::zeros(r, points.n_cols());
        let mut counts = vec![0usize; r];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let dst = sums.row_mut(c);
            for (j, &v) in points.row(i).iter().enumerate() {
                dst[j] += v;
            }
        }
        for c in 0..r {
            if counts[c] == 0 {
                // Reseed an empty cluster from the point farthest from its
                // assigned center.
                let far = assign
                    .iter()
                    .enumerate()
                    .max_by(|a, b| (a.1 .1, a.0).partial_cmp(&(b.1 .1, b.0)).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                centers.row_mut(c).copy_from_slice(points.row(far));
            } else {
                let dst = centers.row_mut(c);
                for j in 0..points.n_cols() {
                    dst[j] = sums.get(c, j) / counts[c] as f64;
                }
            }
        }

        let improved = inertia.is_infinite()
            || inertia == 0.0
            || (inertia - new_inertia).abs() / inertia >= REL_TOL;
        inertia = new_inertia;
        if !improved {
            break;
        }
        if new_inertia == 0.0 {
            break;
        }
    }

    Ok(KMeansFit {
        centers,
        assignments,
        inertia,
        n_iter,
    })
}

fn plus_plus_init(points: &Matrix, r: usize, rng: &mut SplitMix64) -> Matrix {
    let n = points.n_rows();
    let mut centers = Matrix::zeros(r, points.n_cols());
    let mut chosen = vec![false; n];
    let first = rng.index(n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    chosen[first] = true;

    let mut d2 = vec![0.0f64; n];
    for i in 0..n {
        d2[i] = sq_dist(points.row(i), centers.row(0));
    }
    for c in 1..r {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for i in 0..n {
                if chosen[i] {
                    continue;
                }
                target -= d2[i];
                if target <= 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| (0..n).find(|&i| !chosen[i]).unwrap())
        } else {
            // Every remaining point duplicates a center; take the first free one.
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let nd = sq_dist(points.row(i), centers.row(c));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }
    centers
}
