//! Boosting loop and cross-validated model selection.
//!
//! For every leaf count in the grid, k-fold CV tracks the pooled out-of-fold
//! loss per iteration; the (leaf count, iteration) pair with the smallest
//! pooled loss wins and the final model is refit on the full data at that
//! configuration. Iteration 0 (base score only) participates in selection,
//! so a model can legitimately select zero trees on noise targets.

use rayon::prelude::*;

use super::binning::{bin_frame, BinnedFeature};
use super::ensemble::TreeEnsemble;
use super::frame::FeatureFrame;
use super::objective::{base_scores, gradient_hessian, sigmoid, softmax, Objective, Target};
use super::tree::{grow_tree, GrowParams, Tree};
use crate::error::{Error, Result};
use crate::rng::{mix_key, SplitMix64};
use crate::stats::weighted_quantile;

const REFIT_STREAM: u64 = u64::MAX;
const CV_BATCH: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub leaf_grid: Vec<usize>,
    pub feature_subsample: f64,
    pub min_node_frac: f64,
    pub min_node_floor: usize,
    pub folds: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop scanning a CV candidate once the pooled loss has not improved
    /// for this many iterations; None scans the full iteration range.
    pub early_stop_rounds: Option<usize>,
    pub lambda_l2: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            leaf_grid: vec![16, 32, 64],
            feature_subsample: 0.8,
            min_node_frac: 0.001,
            min_node_floor: 20,
            folds: 5,
            max_iterations: 500,
            learning_rate: 0.1,
            seed: 0,
            early_stop_rounds: Some(30),
            lambda_l2: 0.0,
        }
    }
}

/// CV diagnostics: pooled out-of-fold loss per iteration for each leaf-grid
/// candidate (index 0 is the base score).
#[derive(Debug, Clone)]
pub struct CvReport {
    pub curves: Vec<(usize, Vec<f64>)>,
    pub selected_leaves: usize,
    pub selected_iterations: usize,
    pub selected_loss: f64,
}

pub fn fit_gbm(
    features: &FeatureFrame,
    target: &Target,
    weights: &[f64],
    objective: Objective,
    params: &TrainParams,
) -> Result<TreeEnsemble> {
    fit_gbm_with_report(features, target, weights, objective, params).map(|(e, _)| e)
}

pub fn fit_gbm_with_report(
    features: &FeatureFrame,
    target: &Target,
    weights: &[f64],
    objective: Objective,
    params: &TrainParams,
) -> Result<(TreeEnsemble, Option<CvReport>)> {
    objective.validate()?;
    let n = target.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training data".into()));
    }
    if features.n_rows != n || weights.len() != n {
        return Err(Error::InvalidArgument(
            "features, target, and weights must have equal row counts".into(),
        ));
    }
    if n < params.folds || params.folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} rows for {}-fold CV",
            params.folds, params.folds
        )));
    }
    check_target(&objective, target)?;

    let base = base_scores(&objective, target, weights)?;
    let mut ensemble = TreeEnsemble {
        objective,
        feature_names: features.names.clone(),
        feature_kinds: features.kinds(),
        base_scores: base,
        trees: Vec::new(),
        n_iterations: 0,
        selected_leaves: 0,
        degenerate: false,
    };

    if target_is_degenerate(&objective, target, weights) {
        ensemble.degenerate = true;
        return Ok((ensemble, None));
    }

    let binned = bin_frame(features);
    // No splittable features: the base score is the whole model.
    if binned.iter().all(|b| b.n_bins < 2) {
        return Ok((ensemble, None));
    }

    // ----- cross-validated (leaves, iterations) selection -----
    let fold_of = fold_assignment(n, params.folds, params.seed);
    let mut curves: Vec<(usize, Vec<f64>)> = Vec::new();
    for &leaves in &params.leaf_grid {
        let curve = cv_curve(
            &binned, target, weights, &objective, params, leaves, &fold_of,
        );
        curves.push((leaves, curve));
    }

    let mut best = (params.leaf_grid[0], 0usize, f64::INFINITY);
    for (leaves, curve) in &curves {
        for (t, &loss) in curve.iter().enumerate() {
            if loss < best.2 {
                best = (*leaves, t, loss);
            }
        }
    }
    let (sel_leaves, sel_iters, sel_loss) = best;

    // ----- refit on the full data -----
    let all_rows: Vec<u32> = (0..n as u32).collect();
    let mut booster = Booster::new(
        &binned,
        target,
        weights,
        &objective,
        params,
        all_rows,
        REFIT_STREAM,
        sel_leaves,
    );
    for _ in 0..sel_iters {
        booster.step();
    }
    ensemble.trees = booster.trees;
    ensemble.n_iterations = sel_iters;
    ensemble.selected_leaves = sel_leaves;

    let report = CvReport {
        curves,
        selected_leaves: sel_leaves,
        selected_iterations: sel_iters,
        selected_loss: sel_loss,
    };
    Ok((ensemble, Some(report)))
}

fn check_target(objective: &Objective, target: &Target) -> Result<()> {
    match objective {
        Objective::SquaredError | Objective::Pinball { .. } => {
            target.values()?;
        }
        Objective::BinaryLogloss => {
            let y = target.classes()?;
            if y.iter().any(|&c| c > 1) {
                return Err(Error::InvalidArgument(
                    "binary objective requires classes in {0, 1}".into(),
                ));
            }
        }
        Objective::MulticlassLogloss { n_classes } => {
            let y = target.classes()?;
            if y.iter().any(|&c| c as usize >= *n_classes) {
                return Err(Error::InvalidArgument(
                    "class code out of range for multiclass objective".into(),
                ));
            }
        }
    }
    Ok(())
}

fn target_is_degenerate(objective: &Objective, target: &Target, weights: &[f64]) -> bool {
    match objective {
        Objective::BinaryLogloss | Objective::MulticlassLogloss { .. } => {
            let y = target.classes().expect("categorical target");
            y.windows(2).all(|w| w[0] == w[1])
        }
        Objective::SquaredError | Objective::Pinball { .. } => {
            let y = target.values().expect("numeric target");
            let wsum: f64 = weights.iter().sum();
            let mean = y.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / wsum;
            let var = y
                .iter()
                .zip(weights)
                .map(|(a, w)| w * (a - mean) * (a - mean))
                .sum::<f64>()
                / wsum;
            var <= 0.0
        }
    }
}

/// Contiguous fold blocks over a seeded shuffle of the row order.
fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<u32> {
    let mut rng = SplitMix64::for_draw(seed, 0, 0, 0xf01d);
    let perm = rng.permutation(n);
    let mut fold_of = vec![0u32; n];
    for (pos, &row) in perm.iter().enumerate() {
        fold_of[row] = ((pos * folds) / n) as u32;
    }
    fold_of
}

/// Pooled out-of-fold loss per iteration for one leaf count. Folds advance in
/// lockstep batches so early stopping applies to the pooled curve.
fn cv_curve(
    binned: &[BinnedFeature],
    target: &Target,
    weights: &[f64],
    objective: &Objective,
    params: &TrainParams,
    leaves: usize,
    fold_of: &[u32],
) -> Vec<f64> {
    let n = fold_of.len();
    let mut states: Vec<Booster> = (0..params.folds)
        .map(|f| {
            let train_rows: Vec<u32> = (0..n as u32)
                .filter(|&r| fold_of[r as usize] != f as u32)
                .collect();
            Booster::new(
                binned, target, weights, objective, params, train_rows, f as u64, leaves,
            )
        })
        .collect();
    let eval_rows: Vec<Vec<u32>> = (0..params.folds)
        .map(|f| {
            (0..n as u32)
                .filter(|&r| fold_of[r as usize] == f as u32)
                .collect()
        })
        .collect();

    let mut pooled = Vec::with_capacity(params.max_iterations + 1);
    let pool = |states: &[Booster]| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (s, rows) in states.iter().zip(&eval_rows) {
            let (ln, lw) = s.loss_on(rows);
            num += ln;
            den += lw;
        }
        num / den
    };
    pooled.push(pool(&states));

    let mut best = (0usize, pooled[0]);
    let mut t = 0;
    while t < params.max_iterations {
        let batch = CV_BATCH.min(params.max_iterations - t);
        let batch_losses: Vec<Vec<(f64, f64)>> = states
            .par_iter_mut()
            .zip(eval_rows.par_iter())
            .map(|(s, rows)| {
                (0..batch)
                    .map(|_| {
                        s.step();
                        s.loss_on(rows)
                    })
                    .collect()
            })
            .collect();
        for b in 0..batch {
            let mut num = 0.0;
            let mut den = 0.0;
            for fold_losses in &batch_losses {
                num += fold_losses[b].0;
                den += fold_losses[b].1;
            }
            let loss = num / den;
            pooled.push(loss);
            if loss < best.1 {
                best = (t + b + 1, loss);
            }
        }
        t += batch;
        if let Some(patience) = params.early_stop_rounds {
            if t >= best.0 + patience {
                break;
            }
        }
    }
    pooled
}

/// Sequential boosting over a fixed training-row subset.
struct Booster<'a> {
    binned: &'a [BinnedFeature],
    target: &'a Target,
    weights: &'a [f64],
    objective: &'a Objective,
    n_outputs: usize,
    learning_rate: f64,
    grow: GrowParams,
    feature_count: usize,
    subsample: f64,
    stream_key: u64,
    seed: u64,
    train_rows: Vec<u32>,
    /// Raw scores for every row (train and eval), row-major n x v.
    scores: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
    trees: Vec<Tree>,
    iteration: usize,
}

impl<'a> Booster<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        binned: &'a [BinnedFeature],
        target: &'a Target,
        weights: &'a [f64],
        objective: &'a Objective,
        params: &TrainParams,
        train_rows: Vec<u32>,
        stream_key: u64,
        leaves: usize,
    ) -> Self {
        let n = target.len();
        let v = objective.n_outputs();
        let train_w: Vec<f64> = train_rows.iter().map(|&r| weights[r as usize]).collect();
        let train_target = subset_target(target, &train_rows);
        let base = base_scores(objective, &train_target, &train_w).expect("target kind checked");
        let mut scores = vec![0.0; n * v];
        for r in 0..n {
            scores[r * v..(r + 1) * v].copy_from_slice(&base);
        }
        let n_train = train_rows.len();
        let min_data = params
            .min_node_floor
            .max((params.min_node_frac * n_train as f64).ceil() as usize);
        Booster {
            binned,
            target,
            weights,
            objective,
            n_outputs: v,
            learning_rate: params.learning_rate,
            grow: GrowParams {
                num_leaves: leaves,
                min_data_in_leaf: min_data,
                min_sum_hessian: 1e-3,
                lambda_l2: params.lambda_l2,
                cat_smooth: 10.0,
            },
            feature_count: binned.len(),
            subsample: params.feature_subsample,
            stream_key,
            seed: params.seed,
            train_rows,
            scores,
            grad: vec![0.0; n * v],
            hess: vec![0.0; n * v],
            trees: Vec::new(),
            iteration: 0,
        }
    }

    /// Per-iteration feature subset (ascending order).
    fn feature_subset(&self) -> Vec<usize> {
        let d = self.feature_count;
        let take = ((self.subsample * d as f64).round() as usize).clamp(1, d);
        if take == d {
            return (0..d).collect();
        }
        let key = mix_key(mix_key(self.seed, self.stream_key), self.iteration as u64);
        let mut rng = SplitMix64::new(key);
        let mut pool: Vec<usize> = (0..d).collect();
        for i in 0..take {
            let j = i + rng.index(d - i);
            pool.swap(i, j);
        }
        let mut subset = pool[..take].to_vec();
        subset.sort_unstable();
        subset
    }

    fn step(&mut self) {
        gradient_hessian(
            self.objective,
            &self.scores,
            self.target,
            self.weights,
            &mut self.grad,
            &mut self.hess,
        );
        let features = self.feature_subset();
        let v = self.n_outputs;
        let pinball = matches!(self.objective, Objective::Pinball { .. });
        for c in 0..v {
            let n = self.target.len();
            let mut gc = vec![0.0; n];
            let mut hc = vec![0.0; n];
            if v == 1 {
                gc.copy_from_slice(&self.grad);
                if pinball {
                    // First-order mode: the tree is grown against the pinball
                    // subgradient with row weights standing in for curvature.
                    hc.copy_from_slice(self.weights);
                } else {
                    hc.copy_from_slice(&self.hess);
                }
            } else {
                for r in 0..n {
                    gc[r] = self.grad[r * v + c];
                    hc[r] = self.hess[r * v + c];
                }
            }
            let (mut tree, assignment) = grow_tree(
                self.binned,
                &self.train_rows,
                &features,
                &gc,
                &hc,
                self.weights,
                &self.grow,
            );
            if pinball {
                self.renew_pinball_leaves(&mut tree, &assignment);
            }
            for val in tree.leaf_values.iter_mut() {
                *val *= self.learning_rate;
            }
            // Update raw scores everywhere so eval losses stay current.
            let n_rows = self.scores.len() / v;
            for r in 0..n_rows {
                self.scores[r * v + c] += tree.predict_binned(self.binned, r);
            }
            self.trees.push(tree);
        }
        self.iteration += 1;
    }

    /// Replace Newton leaf values with the weighted percentile of residuals.
    fn renew_pinball_leaves(&self, tree: &mut Tree, assignment: &[u32]) {
        let Objective::Pinball { percentile } = self.objective else {
            return;
        };
        let y = self.target.values().expect("numeric target");
        let n_leaves = tree.n_leaves();
        let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); n_leaves];
        let mut leaf_w: Vec<Vec<f64>> = vec![Vec::new(); n_leaves];
        for &r in &self.train_rows {
            let r = r as usize;
            let l = assignment[r] as usize;
            residuals[l].push(y[r] - self.scores[r]);
            leaf_w[l].push(self.weights[r]);
        }
        for l in 0..n_leaves {
            if !residuals[l].is_empty() {
                tree.leaf_values[l] = weighted_quantile(&residuals[l], &leaf_w[l], *percentile);
            }
        }
    }

    /// Weighted loss numerator and weight total over a row subset, from raw
    /// scores through the link.
    fn loss_on(&self, rows: &[u32]) -> (f64, f64) {
        let v = self.n_outputs;
        let mut num = 0.0;
        let mut den = 0.0;
        match self.objective {
            Objective::SquaredError => {
                let y = self.target.values().expect("numeric target");
                for &r in rows {
                    let r = r as usize;
                    let d = y[r] - self.scores[r];
                    num += self.weights[r] * d * d;
                    den += self.weights[r];
                }
            }
            Objective::Pinball { percentile } => {
                let y = self.target.values().expect("numeric target");
                for &r in rows {
                    let r = r as usize;
                    let d = y[r] - self.scores[r];
                    num += self.weights[r] * (percentile * d).max((percentile - 1.0) * d);
                    den += self.weights[r];
                }
            }
            Objective::BinaryLogloss => {
                let y = self.target.classes().expect("categorical target");
                for &r in rows {
                    let r = r as usize;
                    let p = sigmoid(self.scores[r]).clamp(1e-15, 1.0 - 1e-15);
                    let l = if y[r] == 1 { -p.ln() } else { -(1.0 - p).ln() };
                    num += self.weights[r] * l;
                    den += self.weights[r];
                }
            }
            Objective::MulticlassLogloss { .. } => {
                let y = self.target.classes().expect("categorical target");
                let mut prob = vec![0.0; v];
                for &r in rows {
                    let r = r as usize;
                    softmax(&self.scores[r * v..(r + 1) * v], &mut prob);
                    let p = prob[y[r] as usize].clamp(1e-15, 1.0 - 1e-15);
                    num += self.weights[r] * -p.ln();
                    den += self.weights[r];
                }
            }
        }
        (num, den)
    }
}

fn subset_target(target: &Target, rows: &[u32]) -> Target {
    match target {
        Target::Classes(v) => Target::Classes(rows.iter().map(|&r| v[r as usize]).collect()),
        Target::Values(v) => Target::Values(rows.iter().map(|&r| v[r as usize]).collect()),
    }
}
