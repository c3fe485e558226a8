//! Gradient-boosted decision trees under one framework: conditional class
//! probabilities (log-loss), conditional means (squared error), and
//! conditional quantiles (pinball loss).
//!
//! Trees grow leaf-wise over histogram-binned features (255 bins for
//! continuous features, one bin per level for categoricals, with splits
//! found by sorted-gradient partitioning). Log-loss and squared error use
//! second-order (Newton) steps; pinball uses first-order growth with leaf
//! values renewed to the in-leaf weighted percentile of residuals, since its
//! hessian vanishes almost everywhere.

mod binning;
mod ensemble;
mod frame;
mod objective;
mod serialize;
mod train;
mod tree;

pub use ensemble::TreeEnsemble;
pub use frame::{FeatureColumn, FeatureFrame, FeatureKind};
pub use objective::{
    base_scores, gradient_hessian, link, loss_eval, sigmoid, softmax, Objective, Target,
};
pub use serialize::{ensemble_from_str, ensemble_to_string};
pub use train::{fit_gbm, fit_gbm_with_report, CvReport, TrainParams};
