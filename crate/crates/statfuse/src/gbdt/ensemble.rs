//! Fitted gradient-boosted ensembles: prediction and alignment checks.

use rayon::prelude::*;

use super::frame::{FeatureFrame, FeatureKind};
use super::objective::{link, Objective};
use super::tree::Tree;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// An immutable fitted ensemble; trees are stored round-major (iteration t,
/// output c lives at index t * n_outputs + c).
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub objective: Objective,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    pub base_scores: Vec<f64>,
    pub trees: Vec<Tree>,
    pub n_iterations: usize,
    pub selected_leaves: usize,
    /// True when the training target was degenerate (single class or zero
    /// variance) and the model fell back to the base score.
    pub degenerate: bool,
}

impl TreeEnsemble {
    fn check_frame(&self, frame: &FeatureFrame) -> Result<()> {
        if frame.names != self.feature_names {
            return Err(Error::Schema(format!(
                "prediction features [{}] do not match model features [{}]",
                frame.names.join(", "),
                self.feature_names.join(", ")
            )));
        }
        for (kind, (name, have)) in self
            .feature_kinds
            .iter()
            .zip(frame.names.iter().zip(frame.kinds()))
        {
            if *kind != have {
                return Err(Error::Schema(format!(
                    "feature '{name}' kind differs between model and prediction data"
                )));
            }
        }
        Ok(())
    }

    /// Raw additive scores, n x n_outputs.
    pub fn raw_scores(&self, frame: &FeatureFrame) -> Result<Matrix> {
        self.check_frame(frame)?;
        let v = self.objective.n_outputs();
        let n = frame.n_rows;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = self.base_scores.clone();
                for t in 0..self.n_iterations {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += self.trees[t * v + c].predict_row(frame, i);
                    }
                }
                acc
            })
            .collect();
        Ok(Matrix::from_rows(&rows))
    }

    /// Predictions on the objective's natural scale: probabilities for
    /// classification (row-stochastic for multiclass), values otherwise.
    pub fn predict(&self, frame: &FeatureFrame) -> Result<Matrix> {
        let raw = self.raw_scores(frame)?;
        Ok(link(&self.objective, &raw))
    }
}
