//! Regression tree structure and the leaf-wise histogram grower.

use super::binning::{BinKind, BinnedFeature};
use super::frame::{FeatureColumn, FeatureFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Child {
    Node(u32),
    Leaf(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Split {
    /// x <= threshold goes left. `bin` is the training-side boundary.
    Numeric {
        feature: u32,
        threshold: f64,
        bin: u16,
    },
    /// Levels in `left_levels` go left; other observed levels go right;
    /// levels unseen in this node's training rows follow `default_left`.
    Categorical {
        feature: u32,
        left_levels: Vec<u32>,
        observed: Vec<u32>,
    },
}

impl Split {
    pub fn feature(&self) -> usize {
        match self {
            Split::Numeric { feature, .. } => *feature as usize,
            Split::Categorical { feature, .. } => *feature as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub split: Split,
    pub left: Child,
    pub right: Child,
    /// Side holding the larger training weight; unseen levels route here.
    pub default_left: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub leaf_values: Vec<f64>,
    pub root: Child,
}

impl Tree {
    pub fn constant(value: f64) -> Self {
        Tree {
            nodes: Vec::new(),
            leaf_values: vec![value],
            root: Child::Leaf(0),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_values.len()
    }

    /// Evaluate the tree on one row of the prediction frame.
    pub fn predict_row(&self, frame: &FeatureFrame, row: usize) -> f64 {
        let mut at = self.root;
        loop {
            match at {
                Child::Leaf(l) => return self.leaf_values[l as usize],
                Child::Node(n) => {
                    let node = &self.nodes[n as usize];
                    let go_left = match &node.split {
                        Split::Numeric {
                            feature, threshold, ..
                        } => match &frame.columns[*feature as usize] {
                            FeatureColumn::Numeric(v) => v[row] <= *threshold,
                            _ => unreachable!("feature kind checked at predict entry"),
                        },
                        Split::Categorical {
                            feature,
                            left_levels,
                            observed,
                        } => match &frame.columns[*feature as usize] {
                            FeatureColumn::Categorical { codes, .. } => {
                                let c = codes[row];
                                if left_levels.binary_search(&c).is_ok() {
                                    true
                                } else if observed.binary_search(&c).is_ok() {
                                    false
                                } else {
                                    node.default_left
                                }
                            }
                            _ => unreachable!("feature kind checked at predict entry"),
                        },
                    };
                    at = if go_left { node.left } else { node.right };
                }
            }
        }
    }

    /// Evaluate on binned training data (used for score updates during
    /// training; bin boundaries are exactly equivalent to thresholds).
    pub fn predict_binned(&self, binned: &[BinnedFeature], row: usize) -> f64 {
        let mut at = self.root;
        loop {
            match at {
                Child::Leaf(l) => return self.leaf_values[l as usize],
                Child::Node(n) => {
                    let node = &self.nodes[n as usize];
                    let go_left = match &node.split {
                        Split::Numeric { feature, bin, .. } => {
                            binned[*feature as usize].bins[row] <= *bin
                        }
                        Split::Categorical {
                            feature,
                            left_levels,
                            observed,
                        } => {
                            let c = binned[*feature as usize].bins[row] as u32;
                            if left_levels.binary_search(&c).is_ok() {
                                true
                            } else if observed.binary_search(&c).is_ok() {
                                false
                            } else {
                                node.default_left
                            }
                        }
                    };
                    at = if go_left { node.left } else { node.right };
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Leaf-wise grower
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub num_leaves: usize,
    pub min_data_in_leaf: usize,
    pub min_sum_hessian: f64,
    pub lambda_l2: f64,
    pub cat_smooth: f64,
}

struct LeafState {
    begin: usize,
    end: usize,
    sum_g: f64,
    sum_h: f64,
    sum_w: f64,
    /// Back-link to patch the parent's child slot once this leaf splits.
    slot: Slot,
    best: Option<SplitCandidate>,
    seq: usize,
}

#[derive(Clone, Copy)]
enum Slot {
    Root,
    Left(usize),
    Right(usize),
}

struct SplitCandidate {
    gain: f64,
    split: Split,
    left_stats: (f64, f64, f64, usize),
    right_stats: (f64, f64, f64, usize),
}

#[derive(Clone, Copy, Default)]
struct BinStats {
    sum_g: f64,
    sum_h: f64,
    sum_w: f64,
    count: usize,
}

/// Grow one regression tree on gradient/hessian targets over binned features.
///
/// `rows` is the set of training row indices; `features` the iteration's
/// feature subset (ascending). Leaf values are the Newton step -G/(H+lambda);
/// callers rescale by the learning rate and may overwrite them (quantile
/// renewal for pinball). Returns the tree plus per-row leaf assignment for
/// the training rows.
pub fn grow_tree(
    binned: &[BinnedFeature],
    rows: &[u32],
    features: &[usize],
    grad: &[f64],
    hess: &[f64],
    weights: &[f64],
    params: &GrowParams,
) -> (Tree, Vec<u32>) {
    let mut index: Vec<u32> = rows.to_vec();
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut leaves: Vec<LeafState> = Vec::new();

    let (mut sg, mut sh, mut sw) = (0.0, 0.0, 0.0);
    for &r in &index {
        sg += grad[r as usize];
        sh += hess[r as usize];
        sw += weights[r as usize];
    }
    let root = LeafState {
        begin: 0,
        end: index.len(),
        sum_g: sg,
        sum_h: sh,
        sum_w: sw,
        slot: Slot::Root,
        best: None,
        seq: 0,
    };
    leaves.push(root);
    find_best_split(binned, &index, features, grad, hess, weights, params, &mut leaves[0]);

    let mut n_splits_done = 0;
    while leaves.len() < params.num_leaves {
        // Deterministic best-leaf selection: largest gain, ties to the
        // earliest-created leaf.
        let mut pick: Option<usize> = None;
        for (i, leaf) in leaves.iter().enumerate() {
            if let Some(c) = &leaf.best {
                let better = match pick {
                    None => true,
                    Some(p) => {
                        let pg = leaves[p].best.as_ref().unwrap().gain;
                        c.gain > pg || (c.gain == pg && leaf.seq < leaves[p].seq)
                    }
                };
                if better {
                    pick = Some(i);
                }
            }
        }
        let Some(pick) = pick else { break };

        // Split the chosen leaf.
        let LeafState {
            begin, end, slot, ..
        } = leaves[pick];
        let cand = leaves[pick].best.take().unwrap();
        let node_id = nodes.len() as u32;
        match slot {
            Slot::Root => {}
            Slot::Left(p) => nodes[p].left = Child::Node(node_id),
            Slot::Right(p) => nodes[p].right = Child::Node(node_id),
        }
        let default_left = cand.left_stats.2 >= cand.right_stats.2;
        nodes.push(TreeNode {
            split: cand.split.clone(),
            left: Child::Leaf(0),
            right: Child::Leaf(0),
            default_left,
        });

        // Stable partition of the row range.
        let mut left_rows = Vec::with_capacity(cand.left_stats.3);
        let mut right_rows = Vec::with_capacity(cand.right_stats.3);
        for &r in &index[begin..end] {
            if row_goes_left(&cand.split, binned, r as usize) {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        debug_assert_eq!(left_rows.len(), cand.left_stats.3);
        debug_assert_eq!(right_rows.len(), cand.right_stats.3);
        index[begin..begin + left_rows.len()].copy_from_slice(&left_rows);
        index[begin + left_rows.len()..end].copy_from_slice(&right_rows);
        let mid = begin + left_rows.len();

        let seq_base = n_splits_done * 2 + 1;
        let mut left_leaf = LeafState {
            begin,
            end: mid,
            sum_g: cand.left_stats.0,
            sum_h: cand.left_stats.1,
            sum_w: cand.left_stats.2,
            slot: Slot::Left(node_id as usize),
            best: None,
            seq: seq_base,
        };
        let mut right_leaf = LeafState {
            begin: mid,
            end,
            sum_g: cand.right_stats.0,
            sum_h: cand.right_stats.1,
            sum_w: cand.right_stats.2,
            slot: Slot::Right(node_id as usize),
            best: None,
            seq: seq_base + 1,
        };
        if leaves.len() + 1 < params.num_leaves {
            find_best_split(binned, &index, features, grad, hess, weights, params, &mut left_leaf);
            find_best_split(
                binned, &index, features, grad, hess, weights, params, &mut right_leaf,
            );
        }
        leaves[pick] = left_leaf;
        leaves.push(right_leaf);
        n_splits_done += 1;
    }

    // Materialize leaves in creation order and patch child links.
    let mut leaf_values = Vec::with_capacity(leaves.len());
    let mut assignment = vec![0u32; index.iter().map(|&r| r as usize).max().unwrap_or(0) + 1];
    for (leaf_ix, leaf) in leaves.iter().enumerate() {
        let value = -leaf.sum_g / (leaf.sum_h + params.lambda_l2).max(1e-12);
        let li = leaf_values.len() as u32;
        leaf_values.push(value);
        match leaf.slot {
            Slot::Root => {}
            Slot::Left(p) => nodes[p].left = patch(nodes[p].left, li),
            Slot::Right(p) => nodes[p].right = patch(nodes[p].right, li),
        }
        for &r in &index[leaf.begin..leaf.end] {
            assignment[r as usize] = leaf_ix as u32;
        }
    }

    let root = if nodes.is_empty() {
        Child::Leaf(0)
    } else {
        Child::Node(0)
    };
    (
        Tree {
            nodes,
            leaf_values,
            root,
        },
        assignment,
    )
}

fn patch(current: Child, leaf: u32) -> Child {
    match current {
        // Slots already linked to an inner node stay as they are.
        Child::Node(n) => Child::Node(n),
        Child::Leaf(_) => Child::Leaf(leaf),
    }
}

fn row_goes_left(split: &Split, binned: &[BinnedFeature], row: usize) -> bool {
    match split {
        Split::Numeric { feature, bin, .. } => binned[*feature as usize].bins[row] <= *bin,
        Split::Categorical {
            feature,
            left_levels,
            ..
        } => left_levels
            .binary_search(&(binned[*feature as usize].bins[row] as u32))
            .is_ok(),
    }
}

#[inline]
fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda).max(1e-12)
}

#[allow(clippy::too_many_arguments)]
fn find_best_split(
    binned: &[BinnedFeature],
    index: &[u32],
    features: &[usize],
    grad: &[f64],
    hess: &[f64],
    weights: &[f64],
    params: &GrowParams,
    leaf: &mut LeafState,
) {
    let rows = &index[leaf.begin..leaf.end];
    if rows.len() < 2 * params.min_data_in_leaf {
        leaf.best = None;
        return;
    }
    let parent_score = score(leaf.sum_g, leaf.sum_h, params.lambda_l2);
    let mut best: Option<SplitCandidate> = None;

    for &f in features {
        let feature = &binned[f];
        if feature.n_bins < 2 {
            continue;
        }
        let n_bins = feature.n_bins as usize;
        let mut hist = vec![BinStats::default(); n_bins];
        for &r in rows {
            let r = r as usize;
            let b = feature.bins[r] as usize;
            let s = &mut hist[b];
            s.sum_g += grad[r];
            s.sum_h += hess[r];
            s.sum_w += weights[r];
            s.count += 1;
        }

        match &feature.kind {
            BinKind::Numeric { .. } => {
                let mut acc = BinStats::default();
                for b in 0..n_bins - 1 {
                    acc.sum_g += hist[b].sum_g;
                    acc.sum_h += hist[b].sum_h;
                    acc.sum_w += hist[b].sum_w;
                    acc.count += hist[b].count;
                    consider(
                        &mut best,
                        leaf,
                        params,
                        parent_score,
                        acc,
                        || Split::Numeric {
                            feature: f as u32,
                            threshold: feature.threshold_for(b as u16),
                            bin: b as u16,
                        },
                    );
                }
            }
            BinKind::Categorical { .. } => {
                // Sorted-gradient partitioning: order observed levels by their
                // gradient/hessian ratio and scan prefixes.
                let mut order: Vec<usize> = (0..n_bins).filter(|&b| hist[b].count > 0).collect();
                if order.len() < 2 {
                    continue;
                }
                order.sort_by(|&a, &b| {
                    let ra = hist[a].sum_g / (hist[a].sum_h + params.cat_smooth);
                    let rb = hist[b].sum_g / (hist[b].sum_h + params.cat_smooth);
                    ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
                });
                let observed: Vec<u32> = {
                    let mut o: Vec<u32> = order.iter().map(|&b| b as u32).collect();
                    o.sort_unstable();
                    o
                };
                let mut acc = BinStats::default();
                for cut in 0..order.len() - 1 {
                    let b = order[cut];
                    acc.sum_g += hist[b].sum_g;
                    acc.sum_h += hist[b].sum_h;
                    acc.sum_w += hist[b].sum_w;
                    acc.count += hist[b].count;
                    let left_levels: Vec<u32> = {
                        let mut l: Vec<u32> = order[..=cut].iter().map(|&b| b as u32).collect();
                        l.sort_unstable();
                        l
                    };
                    let observed = observed.clone();
                    consider(
                        &mut best,
                        leaf,
                        params,
                        parent_score,
                        acc,
                        move || Split::Categorical {
                            feature: f as u32,
                            left_levels,
                            observed,
                        },
                    );
                }
            }
        }
    }
    leaf.best = best;
}

fn consider<F: FnOnce() -> Split>(
    best: &mut Option<SplitCandidate>,
    leaf: &LeafState,
    params: &GrowParams,
    parent_score: f64,
    left: BinStats,
    make_split: F,
) {
    let right_count = leaf.end - leaf.begin - left.count;
    if left.count < params.min_data_in_leaf || right_count < params.min_data_in_leaf {
        return;
    }
    let right_g = leaf.sum_g - left.sum_g;
    let right_h = leaf.sum_h - left.sum_h;
    let right_w = leaf.sum_w - left.sum_w;
    if left.sum_h < params.min_sum_hessian || right_h < params.min_sum_hessian {
        return;
    }
    let gain = score(left.sum_g, left.sum_h, params.lambda_l2)
        + score(right_g, right_h, params.lambda_l2)
        - parent_score;
    if gain <= 0.0 {
        return;
    }
    let better = match best {
        None => true,
        Some(b) => gain > b.gain,
    };
    if better {
        *best = Some(SplitCandidate {
            gain,
            split: make_split(),
            left_stats: (left.sum_g, left.sum_h, left.sum_w, left.count),
            right_stats: (right_g, right_h, right_w, right_count),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::binning::bin_frame;
    use crate::gbdt::frame::FeatureFrame;

    fn params() -> GrowParams {
        GrowParams {
            num_leaves: 8,
            min_data_in_leaf: 1,
            min_sum_hessian: 1e-6,
            lambda_l2: 0.0,
            cat_smooth: 10.0,
        }
    }

    #[test]
    fn splits_a_step_function() {
        // y = 1{x > 0}; squared-error gradients at F = 0 are -y, hessians 1.
        let x: Vec<f64> = (-50..50).map(|i| i as f64).collect();
        let frame =
            FeatureFrame::new(vec!["x".into()], vec![FeatureColumn::Numeric(x.clone())]).unwrap();
        let binned = bin_frame(&frame);
        let n = x.len();
        let grad: Vec<f64> = x.iter().map(|&v| if v > 0.0 { -1.0 } else { 0.0 }).collect();
        let hess = vec![1.0; n];
        let w = vec![1.0; n];
        let rows: Vec<u32> = (0..n as u32).collect();
        let (tree, _) = grow_tree(&binned, &rows, &[0], &grad, &hess, &w, &params());
        // Tree output should be ~0 for x <= 0 and ~1 for x > 0.
        for (i, &v) in x.iter().enumerate() {
            let pred = tree.predict_row(&frame, i);
            let want = if v > 0.0 { 1.0 } else { 0.0 };
            assert!((pred - want).abs() < 1e-9, "x={v} pred={pred}");
        }
    }

    #[test]
    fn categorical_split_partitions_levels() {
        // Three levels with means 0, 5, 5: levels 1 and 2 should group.
        let codes = vec![0u32, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
        let y: Vec<f64> = codes
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 5.0 })
            .collect();
        let frame = FeatureFrame::new(
            vec!["c".into()],
            vec![FeatureColumn::Categorical {
                codes: codes.clone(),
                n_levels: 3,
            }],
        )
        .unwrap();
        let binned = bin_frame(&frame);
        let grad: Vec<f64> = y.iter().map(|&v| -v).collect();
        let hess = vec![1.0; y.len()];
        let w = vec![1.0; y.len()];
        let rows: Vec<u32> = (0..y.len() as u32).collect();
        let mut p = params();
        p.num_leaves = 2;
        let (tree, _) = grow_tree(&binned, &rows, &[0], &grad, &hess, &w, &p);
        for (i, &want) in y.iter().enumerate() {
            let pred = tree.predict_row(&frame, i);
            assert!((pred - want).abs() < 1e-9, "row {i}");
        }
    }

    #[test]
    fn unseen_level_routes_to_heavier_child() {
        // Level 2 is never observed; default goes where training weight is.
        let codes = vec![0u32, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let y: Vec<f64> = codes.iter().map(|&c| if c == 0 { 1.0 } else { 9.0 }).collect();
        let frame = FeatureFrame::new(
            vec!["c".into()],
            vec![FeatureColumn::Categorical {
                codes: codes.clone(),
                n_levels: 3,
            }],
        )
        .unwrap();
        let binned = bin_frame(&frame);
        let grad: Vec<f64> = y.iter().map(|&v| -v).collect();
        let hess = vec![1.0; y.len()];
        let w = vec![1.0; y.len()];
        let rows: Vec<u32> = (0..y.len() as u32).collect();
        let mut p = params();
        p.num_leaves = 2;
        let (tree, _) = grow_tree(&binned, &rows, &[0], &grad, &hess, &w, &p);
        // Query a frame carrying the unseen level 2: routes to level 0's side
        // (7 of the 10 unit weights).
        let q = FeatureFrame::new(
            vec!["c".into()],
            vec![FeatureColumn::Categorical {
                codes: vec![2],
                n_levels: 3,
            }],
        )
        .unwrap();
        let pred = tree.predict_row(&q, 0);
        assert!((pred - 1.0).abs() < 1e-9, "pred={pred}");
    }

    #[test]
    fn min_data_blocks_tiny_leaves() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v > 18.0 { 100.0 } else { 0.0 }).collect();
        let frame = FeatureFrame::new(vec!["x".into()], vec![FeatureColumn::Numeric(x)]).unwrap();
        let binned = bin_frame(&frame);
        let grad: Vec<f64> = y.iter().map(|&v| -v).collect();
        let hess = vec![1.0; y.len()];
        let w = vec![1.0; y.len()];
        let rows: Vec<u32> = (0..y.len() as u32).collect();
        let mut p = params();
        p.min_data_in_leaf = 5;
        let (tree, assign) = grow_tree(&binned, &rows, &[0], &grad, &hess, &w, &p);
        // No leaf may hold fewer than 5 rows, so the single outlier cannot
        // be isolated.
        let mut counts = vec![0usize; tree.n_leaves()];
        for r in 0..y.len() {
            counts[assign[r] as usize] += 1;
        }
        for c in counts {
            assert!(c >= 5, "leaf with {c} rows");
        }
    }
}
