//! K-nearest-neighbor search: exact brute force, plus a kd-tree with a
//! bounded-relative-error approximate mode for large reference sets.
//!
//! Ordering is fully deterministic: neighbors sort by (distance, index), so
//! ties always resolve toward the smaller reference row.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KnnMode {
    Exact,
    /// kd-tree search with relative distance error bound `eps`: each returned
    /// k-th distance is within (1 + eps) of the true k-th distance.
    Approximate { eps: f64 },
}

/// Flattened query-major neighbor lists.
#[derive(Debug, Clone)]
pub struct KnnResult {
    pub k: usize,
    indices: Vec<u32>,
    distances: Vec<f64>,
}

impl KnnResult {
    pub fn neighbors(&self, query: usize) -> &[u32] {
        &self.indices[query * self.k..(query + 1) * self.k]
    }

    pub fn distances(&self, query: usize) -> &[f64] {
        &self.distances[query * self.k..(query + 1) * self.k]
    }

    pub fn n_queries(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }
}

pub fn knn_search(
    reference: &Matrix,
    queries: &Matrix,
    k: usize,
    mode: KnnMode,
) -> Result<KnnResult> {
    if reference.n_cols() != queries.n_cols() {
        return Err(Error::InvalidArgument(format!(
            "reference has {} columns, queries {}",
            reference.n_cols(),
            queries.n_cols()
        )));
    }
    if k == 0 || k > reference.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for {} reference rows",
            reference.n_rows()
        )));
    }
    let per_query: Vec<(Vec<u32>, Vec<f64>)> = match mode {
        KnnMode::Exact => (0..queries.n_rows())
            .into_par_iter()
            .map(|qi| brute_force_k(reference, queries.row(qi), k))
            .collect(),
        KnnMode::Approximate { eps } => {
            let tree = KdTree::build(reference);
            (0..queries.n_rows())
                .into_par_iter()
                .map(|qi| tree.search(queries.row(qi), k, eps))
                .collect()
        }
    };
    let mut indices = Vec::with_capacity(queries.n_rows() * k);
    let mut distances = Vec::with_capacity(queries.n_rows() * k);
    for (ix, d) in per_query {
        indices.extend(ix);
        distances.extend(d);
    }
    Ok(KnnResult {
        k,
        indices,
        distances,
    })
}

fn brute_force_k(reference: &Matrix, query: &[f64], k: usize) -> (Vec<u32>, Vec<f64>) {
    let n = reference.n_rows();
    let mut cand: Vec<(f64, u32)> = (0..n)
        .map(|i| (sq_dist(reference.row(i), query), i as u32))
        .collect();
    if k < n {
        cand.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        cand.truncate(k);
    }
    cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let indices = cand.iter().map(|&(_, i)| i).collect();
    let distances = cand.iter().map(|&(d2, _)| d2.sqrt()).collect();
    (indices, distances)
}

/// Single nearest reference row for one query (brute force).
pub fn nearest_one(reference: &Matrix, query: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..reference.n_rows() {
        let d2 = sq_dist(reference.row(i), query);
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    best.1
}

// ---------------------------------------------------------------------------
// kd-tree
// ---------------------------------------------------------------------------

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over the rows of a matrix.
pub struct KdTree<'a> {
    points: &'a Matrix,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

impl<'a> KdTree<'a> {
    pub fn n_points(&self) -> usize {
        self.points.n_rows()
    }

    pub fn build(points: &'a Matrix) -> Self {
        let mut order: Vec<u32> = (0..points.n_rows() as u32).collect();
        let mut nodes = Vec::new();
        let n = order.len();
        let root = build_node(points, &mut order, 0, n, &mut nodes);
        KdTree {
            points,
            order,
            nodes,
            root,
        }
    }

    /// Returns (indices, distances) of the k nearest points, ordered by
    /// (distance, index). With eps = 0 the result is exact.
    pub fn search(&self, query: &[f64], k: usize, eps: f64) -> (Vec<u32>, Vec<f64>) {
        let shrink = 1.0 / ((1.0 + eps) * (1.0 + eps));
        // Max-heap semantics over (d2, idx) via sorted insertion into a
        // bounded vec; k is small relative to n in every caller.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search_node(self.root, query, k, shrink, 0.0, &mut best);
        let indices = best.iter().map(|&(_, i)| i).collect();
        let distances = best.iter().map(|&(d2, _)| d2.sqrt()).collect();
        (indices, distances)
    }

    fn search_node(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        shrink: f64,
        min_d2: f64,
        best: &mut Vec<(f64, u32)>,
    ) {
        if best.len() == k && min_d2 * (1.0 / shrink) > best[k - 1].0 {
            return;
        }
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &ix in &self.order[*start..*end] {
                    let d2 = sq_dist(self.points.row(ix as usize), query);
                    let entry = (d2, ix);
                    if best.len() < k {
                        let pos = best.partition_point(|e| *e < entry);
                        best.insert(pos, entry);
                    } else if entry < best[k - 1] {
                        let pos = best.partition_point(|e| *e < entry);
                        best.insert(pos, entry);
                        best.truncate(k);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let delta = query[*dim] - value;
                let (near, far) = if delta <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search_node(near, query, k, shrink, min_d2, best);
                // Crossing the split plane adds at least delta^2 to the
                // reachable distance along this dimension.
                let far_min = min_d2 + delta * delta;
                if best.len() < k || far_min * (1.0 / shrink) <= best[k - 1].0 {
                    self.search_node(far, query, k, shrink, far_min, best);
                }
            }
        }
    }
}

fn build_node(
    points: &Matrix,
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let len = end - start;
    if len <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    // Split on the dimension with the widest extent.
    let d = points.n_cols();
    let mut best_dim = 0;
    let mut best_extent = -1.0;
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &ix in order[start..end].iter() {
            let v = points.get(ix as usize, j);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best_extent {
            best_extent = hi - lo;
            best_dim = j;
        }
    }
    if best_extent <= 0.0 {
        // All points identical across dimensions; no useful split.
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    let mid = start + len / 2;
    let slice = &mut order[start..end];
    slice.select_nth_unstable_by(len / 2, |&a, &b| {
        points
            .get(a as usize, best_dim)
            .partial_cmp(&points.get(b as usize, best_dim))
            .unwrap()
            .then(a.cmp(&b))
    });
    let split_value = points.get(order[mid] as usize, best_dim);
    let left = build_node(points, order, start, mid, nodes);
    let right = build_node(points, order, mid, end, nodes);
    nodes.push(Node::Split {
        dim: best_dim,
        value: split_value,
        left,
        right,
    });
    nodes.len() - 1
}
