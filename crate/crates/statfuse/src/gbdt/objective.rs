//! Boosting objectives: loss evaluation, gradients/hessians, base scores,
//! and the link from raw scores to predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::weighted_quantile;

pub const PROB_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    SquaredError,
    BinaryLogloss,
    MulticlassLogloss { n_classes: usize },
    Pinball { percentile: f64 },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::MulticlassLogloss { n_classes } if *n_classes < 2 => Err(
                Error::InvalidArgument("multiclass objective needs at least 2 classes".into()),
            ),
            Objective::Pinball { percentile } if !(*percentile > 0.0 && *percentile < 1.0) => Err(
                Error::InvalidArgument("pinball percentile must lie strictly inside (0,1)".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Number of raw score columns (trees per boosting round).
    pub fn n_outputs(&self) -> usize {
        match self {
            Objective::MulticlassLogloss { n_classes } => *n_classes,
            _ => 1,
        }
    }

    /// Number of prediction columns.
    pub fn n_prediction_cols(&self) -> usize {
        self.n_outputs()
    }

    pub fn is_classification(&self) -> bool {
        matches!(
            self,
            Objective::BinaryLogloss | Objective::MulticlassLogloss { .. }
        )
    }
}

/// Training target: class codes for classification, values for regression.
#[derive(Debug, Clone)]
pub enum Target {
    Classes(Vec<u32>),
    Values(Vec<f64>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Classes(v) => v.len(),
            Target::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Result<&[u32]> {
        match self {
            Target::Classes(v) => Ok(v),
            _ => Err(Error::InvalidArgument(
                "objective expects a categorical target".into(),
            )),
        }
    }

    pub fn values(&self) -> Result<&[f64]> {
        match self {
            Target::Values(v) => Ok(v),
            _ => Err(Error::InvalidArgument(
                "objective expects a numeric target".into(),
            )),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Softmax over one row of raw scores, written into `out`.
pub fn softmax(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Base raw scores fitted to the weighted marginal target.
pub fn base_scores(objective: &Objective, target: &Target, weights: &[f64]) -> Result<Vec<f64>> {
    let wsum: f64 = weights.iter().sum();
    match objective {
        Objective::SquaredError => {
            let y = target.values()?;
            let mean = y.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / wsum;
            Ok(vec![mean])
        }
        Objective::Pinball { percentile } => {
            let y = target.values()?;
            Ok(vec![weighted_quantile(y, weights, *percentile)])
        }
        Objective::BinaryLogloss => {
            let y = target.classes()?;
            let p = y
                .iter()
                .zip(weights)
                .map(|(&c, w)| if c == 1 { *w } else { 0.0 })
                .sum::<f64>()
                / wsum;
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            Ok(vec![(p / (1.0 - p)).ln()])
        }
        Objective::MulticlassLogloss { n_classes } => {
            let y = target.classes()?;
            let mut prior = vec![0.0; *n_classes];
            for (&c, w) in y.iter().zip(weights) {
                prior[c as usize] += w;
            }
            Ok(prior
                .iter()
                .map(|&p| (p / wsum).max(1e-12).ln())
                .collect())
        }
    }
}

/// Per-row gradient and hessian of the loss with respect to raw scores,
/// weighted by the row weight. For multi-output objectives, `scores`, `grad`
/// and `hess` are row-major n x n_outputs.
pub fn gradient_hessian(
    objective: &Objective,
    scores: &[f64],
    target: &Target,
    weights: &[f64],
    grad: &mut [f64],
    hess: &mut [f64],
) {
    match objective {
        Objective::SquaredError => {
            let y = target.values().expect("numeric target");
            for i in 0..y.len() {
                grad[i] = 2.0 * weights[i] * (scores[i] - y[i]);
                hess[i] = 2.0 * weights[i];
            }
        }
        Objective::Pinball { percentile } => {
            // Subgradient: d/df max(P(y-f), (P-1)(y-f)) is (1{y<f} - P).
            // The true hessian is zero almost everywhere; tree growth uses
            // the row weight instead (first-order mode with leaf renewal).
            let y = target.values().expect("numeric target");
            for i in 0..y.len() {
                let ind = if y[i] < scores[i] { 1.0 } else { 0.0 };
                grad[i] = weights[i] * (ind - percentile);
                hess[i] = 0.0;
            }
        }
        Objective::BinaryLogloss => {
            let y = target.classes().expect("categorical target");
            for i in 0..y.len() {
                let p = sigmoid(scores[i]);
                let yi = if y[i] == 1 { 1.0 } else { 0.0 };
                grad[i] = weights[i] * (p - yi);
                hess[i] = weights[i] * p * (1.0 - p);
            }
        }
        Objective::MulticlassLogloss { n_classes } => {
            let y = target.classes().expect("categorical target");
            let v = *n_classes;
            let mut prob = vec![0.0; v];
            for i in 0..y.len() {
                softmax(&scores[i * v..(i + 1) * v], &mut prob);
                for c in 0..v {
                    let yic = if y[i] as usize == c { 1.0 } else { 0.0 };
                    grad[i * v + c] = weights[i] * (prob[c] - yic);
                    hess[i * v + c] = weights[i] * prob[c] * (1.0 - prob[c]);
                }
            }
        }
    }
}

/// Map raw scores to the prediction scale (probabilities or values).
pub fn link(objective: &Objective, raw: &Matrix) -> Matrix {
    match objective {
        Objective::SquaredError | Objective::Pinball { .. } => raw.clone(),
        Objective::BinaryLogloss => {
            let mut out = Matrix::zeros(raw.n_rows(), 1);
            for i in 0..raw.n_rows() {
                out.set(i, 0, sigmoid(raw.get(i, 0)));
            }
            out
        }
        Objective::MulticlassLogloss { n_classes } => {
            let mut out = Matrix::zeros(raw.n_rows(), *n_classes);
            for i in 0..raw.n_rows() {
                let row = raw.row(i).to_vec();
                softmax(&row, out.row_mut(i));
            }
            out
        }
    }
}

/// Weighted mean loss of predictions (on the linked scale) against actuals.
/// Log-loss probabilities are clamped to [1e-15, 1 - 1e-15] before the log.
pub fn loss_eval(
    objective: &Objective,
    predictions: &Matrix,
    target: &Target,
    weights: &[f64],
) -> f64 {
    let n = target.len();
    assert_eq!(predictions.n_rows(), n, "prediction rows");
    assert_eq!(weights.len(), n, "weight rows");
    let wsum: f64 = weights.iter().sum();
    let total: f64 = match objective {
        Objective::SquaredError => {
            let y = target.values().expect("numeric target");
            (0..n)
                .map(|i| {
                    let d = y[i] - predictions.get(i, 0);
                    weights[i] * d * d
                })
                .sum()
        }
        Objective::Pinball { percentile } => {
            let y = target.values().expect("numeric target");
            (0..n)
                .map(|i| {
                    let d = y[i] - predictions.get(i, 0);
                    weights[i] * (percentile * d).max((percentile - 1.0) * d)
                })
                .sum()
        }
        Objective::BinaryLogloss => {
            let y = target.classes().expect("categorical target");
            (0..n)
                .map(|i| {
                    let p = clamp_prob(predictions.get(i, 0));
                    let l = if y[i] == 1 { -p.ln() } else { -(1.0 - p).ln() };
                    weights[i] * l
                })
                .sum()
        }
        Objective::MulticlassLogloss { .. } => {
            let y = target.classes().expect("categorical target");
            (0..n)
                .map(|i| {
                    let p = clamp_prob(predictions.get(i, y[i] as usize));
                    weights[i] * -p.ln()
                })
                .sum()
        }
    };
    total / wsum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_zero_loss() {
        let y = Target::Values(vec![1.0, 2.0, 3.0]);
        let pred = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let w = vec![1.0, 2.0, 0.5];
        assert_eq!(loss_eval(&Objective::SquaredError, &pred, &y, &w), 0.0);
        assert_eq!(
            loss_eval(&Objective::Pinball { percentile: 0.3 }, &pred, &y, &w),
            0.0
        );
    }

    #[test]
    fn median_pinball_is_half_mae() {
        let y = Target::Values(vec![1.0, 5.0, -2.0, 4.0]);
        let pred = Matrix::from_vec(4, 1, vec![0.0, 0.0, 0.0, 0.0]);
        let w = vec![1.0, 3.0, 2.0, 1.0];
        let pin = loss_eval(&Objective::Pinball { percentile: 0.5 }, &pred, &y, &w);
        let mae: f64 = y
            .values()
            .unwrap()
            .iter()
            .zip(&w)
            .map(|(&v, &wi)| wi * v.abs())
            .sum::<f64>()
            / w.iter().sum::<f64>();
        assert!((pin - 0.5 * mae).abs() < 1e-15);
    }

    #[test]
    fn coin_flip_logloss_is_ln2() {
        let y = Target::Classes(vec![0, 1, 1, 0]);
        let pred = Matrix::from_vec(4, 1, vec![0.5; 4]);
        let w = vec![1.0; 4];
        let l = loss_eval(&Objective::BinaryLogloss, &pred, &y, &w);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logloss_clamps_extreme_probabilities() {
        let y = Target::Classes(vec![1]);
        let pred = Matrix::from_vec(1, 1, vec![0.0]);
        let w = vec![1.0];
        let l = loss_eval(&Objective::BinaryLogloss, &pred, &y, &w);
        assert!(l.is_finite());
        assert!((l - (-PROB_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let raw = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.3, 10.0, 10.0, 10.0]);
        let obj = Objective::MulticlassLogloss { n_classes: 3 };
        let p = link(&obj, &raw);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    // Central-difference check of gradients and hessians through the link,
    // per objective, against loss_eval itself.
    fn fd_check(objective: Objective, scores: Vec<f64>, target: Target, w: Vec<f64>) {
        let n = target.len();
        let v = objective.n_outputs();
        let mut grad = vec![0.0; n * v];
        let mut hess = vec![0.0; n * v];
        gradient_hessian(&objective, &scores, &target, &w, &mut grad, &mut hess);

        let wsum: f64 = w.iter().sum();
        let loss_at = |s: &[f64]| -> f64 {
            let raw = Matrix::from_vec(n, v, s.to_vec());
            let pred = link(&objective, &raw);
            loss_eval(&objective, &pred, &target, &w) * wsum
        };
        let h = 1e-5;
        for i in 0..n * v {
            let mut s_plus = scores.clone();
            s_plus[i] += h;
            let mut s_minus = scores.clone();
            s_minus[i] -= h;
            let g_fd = (loss_at(&s_plus) - loss_at(&s_minus)) / (2.0 * h);
            assert!(
                (grad[i] - g_fd).abs() <= 1e-6 * grad[i].abs().max(1.0),
                "{objective:?} grad[{i}]: analytic {} vs fd {g_fd}",
                grad[i]
            );
            if !matches!(objective, Objective::Pinball { .. }) {
                let h_fd =
                    (loss_at(&s_plus) - 2.0 * loss_at(&scores) + loss_at(&s_minus)) / (h * h);
                assert!(
                    (hess[i] - h_fd).abs() <= 1e-4 * hess[i].abs().max(1.0),
                    "{objective:?} hess[{i}]: analytic {} vs fd {h_fd}",
                    hess[i]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(
            Objective::SquaredError,
            vec![0.3, -1.0, 2.0],
            Target::Values(vec![1.0, 0.0, 2.5]),
            vec![1.0, 2.0, 0.7],
        );
        fd_check(
            Objective::BinaryLogloss,
            vec![0.4, -0.9, 1.3],
            Target::Classes(vec![1, 0, 1]),
            vec![1.0, 1.5, 0.5],
        );
        fd_check(
            Objective::MulticlassLogloss { n_classes: 3 },
            vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.3],
            Target::Classes(vec![2, 0]),
            vec![1.0, 2.0],
        );
        // Pinball away from the kink.
        fd_check(
            Objective::Pinball { percentile: 0.25 },
            vec![0.0, 0.0],
            Target::Values(vec![1.0, -1.0]),
            vec![1.0, 3.0],
        );
    }
}
