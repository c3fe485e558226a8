//! Predictor prescreening via an L1-regularized linear-model path.
//!
//! Each fusion variable gets a LASSO path over the full predictor set; the
//! retained subset is the support of the first path entry explaining 95% of
//! the deviance achievable at the smallest lambda. Gaussian paths use exact
//! coordinate descent; binomial and multinomial paths use
//! majorization-minimization steps with the standard curvature bounds (1/4
//! and 1/2), the multinomial with a grouped penalty across classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::sigmoid;
use crate::matrix::Matrix;
use crate::microdata::{ColumnData, ColumnKind, Microdata};

pub const N_LAMBDAS: usize = 100;
pub const LAMBDA_MIN_RATIO: f64 = 0.001;
pub const SCREEN_THRESHOLD: f64 = 0.95;
/// Below this deviance fraction the screen treats the response as noise and
/// reduces to the null model.
pub const NULL_DEVIANCE_FLOOR: f64 = 0.025;
const COEF_ZERO_TOL: f64 = 1e-10;
const CONVERGE_TOL: f64 = 1e-6;
const MAX_PASSES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    Binomial,
    Multinomial { n_classes: usize },
}

impl Family {
    fn n_outputs(&self) -> usize {
        match self {
            Family::Multinomial { n_classes } => *n_classes,
            _ => 1,
        }
    }
}

/// Response for a path fit: values for gaussian, class codes otherwise.
#[derive(Debug, Clone)]
pub enum Response {
    Values(Vec<f64>),
    Classes(Vec<u32>),
}

impl Response {
    fn len(&self) -> usize {
        match self {
            Response::Values(v) => v.len(),
            Response::Classes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoPath {
    pub family: Family,
    /// Decreasing lambda sequence.
    pub lambdas: Vec<f64>,
    /// Per lambda: coefficient matrix flattened column-major by feature
    /// (feature j, output k at j * n_outputs + k).
    pub coefficients: Vec<Vec<f64>>,
    pub deviance_explained: Vec<f64>,
}

impl LassoPath {
    /// Active feature indices at one path entry.
    pub fn support(&self, entry: usize) -> Vec<usize> {
        let v = self.family.n_outputs();
        let coef = &self.coefficients[entry];
        (0..coef.len() / v)
            .filter(|&j| {
                coef[j * v..(j + 1) * v]
                    .iter()
                    .any(|c| c.abs() > COEF_ZERO_TOL)
            })
            .collect()
    }
}

/// Fit an L1 path over a standardized design matrix.
///
/// `x` must be standardized (zero mean, unit variance per column with
/// constant columns already dropped); n >= 10.
pub fn lasso_path(
    x: &Matrix,
    response: &Response,
    family: Family,
    lambdas: Option<Vec<f64>>,
) -> Result<LassoPath> {
    let n = x.n_rows();
    if n < 10 {
        return Err(Error::InvalidArgument(
            "lasso_path needs at least 10 rows".into(),
        ));
    }
    if response.len() != n {
        return Err(Error::InvalidArgument(
            "response length must match feature rows".into(),
        ));
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument(
            "non-finite feature values in lasso_path".into(),
        ));
    }
    match (&family, response) {
        (Family::Gaussian, Response::Values(_)) => {}
        (Family::Binomial, Response::Classes(c)) => {
            if c.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(
                    "binomial response must be 0/1".into(),
                ));
            }
        }
        (Family::Multinomial { n_classes }, Response::Classes(c)) => {
            if c.iter().any(|&v| (v as usize) >= *n_classes) {
                return Err(Error::InvalidArgument("class code out of range".into()));
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "response type does not match family".into(),
            ))
        }
    }

    let mut solver = Solver::new(x, response, family);
    let lambdas = match lambdas {
        Some(l) => l,
        None => {
            let lmax = solver.lambda_max();
            log_space(lmax, lmax * LAMBDA_MIN_RATIO, N_LAMBDAS)
        }
    };

    let mut coefficients = Vec::with_capacity(lambdas.len());
    let mut deviance_explained = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        solver.fit_at(lambda);
        coefficients.push(solver.beta.clone());
        deviance_explained.push(solver.deviance_explained());
    }

    Ok(LassoPath {
        family,
        lambdas,
        coefficients,
        deviance_explained,
    })
}

fn log_space(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    let (lh, ll) = (hi.ln(), lo.ln());
    (0..count)
        .map(|i| (lh + (ll - lh) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

// ---------------------------------------------------------------------------
// Path solver
// ---------------------------------------------------------------------------

struct Solver<'a> {
    x: &'a Matrix,
    family: Family,
    y_values: Vec<f64>,
    y_classes: Vec<u32>,
    n: usize,
    d: usize,
    v: usize,
    /// Flattened feature-major coefficients.
    beta: Vec<f64>,
    intercept: Vec<f64>,
    /// Linear predictor per row and output.
    eta: Vec<f64>,
    null_deviance: f64,
    y_mean: f64,
    class_share: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(x: &'a Matrix, response: &Response, family: Family) -> Self {
        let n = x.n_rows();
        let d = x.n_cols();
        let v = family.n_outputs();
        let (y_values, y_classes) = match response {
            Response::Values(v) => (v.clone(), Vec::new()),
            Response::Classes(c) => (Vec::new(), c.clone()),
        };
        let y_mean = if y_values.is_empty() {
            if y_classes.is_empty() {
                0.0
            } else {
                y_classes.iter().map(|&c| c as f64).sum::<f64>() / n as f64
            }
        } else {
            y_values.iter().sum::<f64>() / n as f64
        };
        let mut class_share = vec![0.0; v.max(1)];
        if !y_classes.is_empty() && v > 1 {
            for &c in &y_classes {
                class_share[c as usize] += 1.0 / n as f64;
            }
        }
        let mut s = Solver {
            x,
            family,
            y_values,
            y_classes,
            n,
            d,
            v,
            beta: vec![0.0; d * v],
            intercept: vec![0.0; v],
            eta: vec![0.0; n * v],
            null_deviance: 0.0,
            y_mean,
            class_share,
        };
        s.reset_to_null();
        s.null_deviance = s.deviance();
        s
    }

    fn reset_to_null(&mut self) {
        self.beta.iter_mut().for_each(|b| *b = 0.0);
        match self.family {
            Family::Gaussian => {
                self.intercept[0] = self.y_mean;
            }
            Family::Binomial => {
                let p = self.y_mean.clamp(1e-12, 1.0 - 1.0e-12);
                self.intercept[0] = (p / (1.0 - p)).ln();
            }
            Family::Multinomial { .. } => {
                let mut logs: Vec<f64> = self
                    .class_share
                    .iter()
                    .map(|&p| p.max(1e-12).ln())
                    .collect();
                let mean = logs.iter().sum::<f64>() / logs.len() as f64;
                logs.iter_mut().for_each(|l| *l -= mean);
                self.intercept.copy_from_slice(&logs);
            }
        }
        for r in 0..self.n {
            for k in 0..self.v {
                self.eta[r * self.v + k] = self.intercept[k];
            }
        }
    }

    /// Largest lambda with an all-zero solution (gradient norm at the null).
    fn lambda_max(&mut self) -> f64 {
        self.reset_to_null();
        let mut lmax = 0.0f64;
        for j in 0..self.d {
            let g = self.penalized_gradient(j);
            let norm = match self.family {
                Family::Multinomial { .. } => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
                _ => g[0].abs(),
            };
            lmax = lmax.max(norm);
        }
        // Nudge up so the first entry is exactly null even with rounding.
        lmax * (1.0 + 1e-12)
    }

    /// (1/n) X_j' (y - mu) per output.
    fn penalized_gradient(&self, j: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.v];
        match self.family {
            Family::Gaussian => {
                let mut acc = 0.0;
                for r in 0..self.n {
                    acc += self.x.get(r, j) * (self.y_values[r] - self.eta[r]);
                }
                g[0] = acc / self.n as f64;
            }
            Family::Binomial => {
                let mut acc = 0.0;
                for r in 0..self.n {
                    let p = sigmoid(self.eta[r]);
                    let y = f64::from(self.y_classes[r]);
                    acc += self.x.get(r, j) * (y - p);
                }
                g[0] = acc / self.n as f64;
            }
            Family::Multinomial { .. } => {
                for r in 0..self.n {
                    let row = &self.eta[r * self.v..(r + 1) * self.v];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|e| (e - m).exp()).sum();
                    let xrj = self.x.get(r, j);
                    for k in 0..self.v {
                        let p = (row[k] - m).exp() / denom;
                        let y = f64::from(self.y_classes[r] as usize == k);
                        g[k] += xrj * (y - p);
                    }
                }
                for gk in g.iter_mut() {
                    *gk /= self.n as f64;
                }
            }
        }
        g
    }

    fn fit_at(&mut self, lambda: f64) {
        match self.family {
            Family::Gaussian => self.fit_gaussian(lambda),
            Family::Binomial => self.fit_mm(lambda, 0.25),
            Family::Multinomial { .. } => self.fit_mm(lambda, 0.5),
        }
    }

    /// Exact cyclic coordinate descent for the gaussian family.
    fn fit_gaussian(&mut self, lambda: f64) {
        // Residual r = y - intercept - x beta, kept incrementally.
        let mut resid: Vec<f64> = (0..self.n).map(|r| self.y_values[r] - self.eta[r]).collect();
        for _ in 0..MAX_PASSES {
            let mut max_step = 0.0f64;
            for j in 0..self.d {
                let old = self.beta[j];
                let mut rho = 0.0;
                for r in 0..self.n {
                    rho += self.x.get(r, j) * resid[r];
                }
                rho = rho / self.n as f64 + old;
                let new = soft_threshold(rho, lambda);
                if new != old {
                    let delta = new - old;
                    for r in 0..self.n {
                        resid[r] -= delta * self.x.get(r, j);
                    }
                    self.beta[j] = new;
                    max_step = max_step.max(delta.abs());
                }
            }
            // Intercept re-centering.
            let shift = resid.iter().sum::<f64>() / self.n as f64;
            if shift != 0.0 {
                self.intercept[0] += shift;
                for r in resid.iter_mut() {
                    *r -= shift;
                }
                max_step = max_step.max(shift.abs());
            }
            if max_step < CONVERGE_TOL {
                break;
            }
        }
        for r in 0..self.n {
            self.eta[r] = self.y_values[r] - resid[r];
        }
    }

    /// Majorization steps with curvature bound `c` per unit feature variance;
    /// grouped soft-threshold across outputs for the multinomial family.
    fn fit_mm(&mut self, lambda: f64, c: f64) {
        for _ in 0..MAX_PASSES {
            let mut max_step = 0.0f64;
            for j in 0..self.d {
                let g = self.penalized_gradient(j);
                let old: Vec<f64> = self.beta[j * self.v..(j + 1) * self.v].to_vec();
                let u: Vec<f64> = old.iter().zip(&g).map(|(&b, &gk)| c * b + gk).collect();
                let new: Vec<f64> = if self.v == 1 {
                    vec![soft_threshold(u[0], lambda) / c]
                } else {
                    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= lambda {
                        vec![0.0; self.v]
                    } else {
                        u.iter().map(|&uk| uk * (1.0 - lambda / norm) / c).collect()
                    }
                };
                let mut changed = false;
                for k in 0..self.v {
                    let delta = new[k] - old[k];
                    if delta != 0.0 {
                        changed = true;
                        max_step = max_step.max(delta.abs());
                        self.beta[j * self.v + k] = new[k];
                    }
                }
                if changed {
                    for r in 0..self.n {
                        let xrj = self.x.get(r, j);
                        for k in 0..self.v {
                            self.eta[r * self.v + k] += xrj * (new[k] - old[k]);
                        }
                    }
                }
            }
            // Unpenalized intercept majorization step.
            let gi = self.intercept_gradient();
            for k in 0..self.v {
                let step = gi[k] / c;
                if step != 0.0 {
                    self.intercept[k] += step;
                    for r in 0..self.n {
                        self.eta[r * self.v + k] += step;
                    }
                    max_step = max_step.max(step.abs());
                }
            }
            if self.v > 1 {
                // Center intercepts for identifiability.
                let mean = self.intercept.iter().sum::<f64>() / self.v as f64;
                if mean != 0.0 {
                    for k in 0..self.v {
                        self.intercept[k] -= mean;
                        for r in 0..self.n {
                            self.eta[r * self.v + k] -= mean;
                        }
                    }
                }
            }
            if max_step < CONVERGE_TOL {
                break;
            }
        }
    }

    fn intercept_gradient(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.v];
        match self.family {
            Family::Gaussian => unreachable!("gaussian handles its own intercept"),
            Family::Binomial => {
                for r in 0..self.n {
                    g[0] += f64::from(self.y_classes[r]) - sigmoid(self.eta[r]);
                }
                g[0] /= self.n as f64;
            }
            Family::Multinomial { .. } => {
                for r in 0..self.n {
                    let row = &self.eta[r * self.v..(r + 1) * self.v];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|e| (e - m).exp()).sum();
                    for k in 0..self.v {
                        let p = (row[k] - m).exp() / denom;
                        g[k] += f64::from(self.y_classes[r] as usize == k) - p;
                    }
                }
                for gk in g.iter_mut() {
                    *gk /= self.n as f64;
                }
            }
        }
        g
    }

    fn deviance(&self) -> f64 {
        match self.family {
            Family::Gaussian => (0..self.n)
                .map(|r| {
                    let d = self.y_values[r] - self.eta[r];
                    d * d
                })
                .sum(),
            Family::Binomial => (0..self.n)
                .map(|r| {
                    let p = sigmoid(self.eta[r]).clamp(1e-15, 1.0 - 1e-15);
                    let l = if self.y_classes[r] == 1 {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    };
                    2.0 * l
                })
                .sum(),
            Family::Multinomial { .. } => (0..self.n)
                .map(|r| {
                    let row = &self.eta[r * self.v..(r + 1) * self.v];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|e| (e - m).exp()).sum();
                    let p = ((row[self.y_classes[r] as usize] - m).exp() / denom)
                        .clamp(1e-15, 1.0 - 1e-15);
                    -2.0 * p.ln()
                })
                .sum(),
        }
    }

    fn deviance_explained(&self) -> f64 {
        if self.null_deviance <= 0.0 {
            return 0.0;
        }
        1.0 - self.deviance() / self.null_deviance
    }
}

#[inline]
fn soft_threshold(rho: f64, lambda: f64) -> f64 {
    if rho > lambda {
        rho - lambda
    } else if rho < -lambda {
        rho + lambda
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Design matrix construction
// ---------------------------------------------------------------------------

/// Standardized design matrix with indicator expansion for categoricals and a
/// map back to parent predictor names.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: Matrix,
    /// Parent predictor (index into `parents`) for each design column.
    pub column_parent: Vec<usize>,
    pub parents: Vec<String>,
}

pub fn build_design(md: &Microdata, predictors: &[String]) -> Result<DesignMatrix> {
    let n = md.n_rows();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut column_parent = Vec::new();
    for (p_ix, name) in predictors.iter().enumerate() {
        let spec = md
            .spec(name)
            .ok_or_else(|| Error::Schema(format!("no predictor named '{name}'")))?;
        match (md.column(name).unwrap(), &spec.kind) {
            (ColumnData::Numeric(v), _) => {
                if let Some(c) = standardize(v) {
                    columns.push(c);
                    column_parent.push(p_ix);
                }
            }
            (ColumnData::Categorical(codes), ColumnKind::Categorical { levels }) => {
                for l in 0..levels.len() as u32 {
                    let ind: Vec<f64> = codes.iter().map(|&c| f64::from(c == l)).collect();
                    if let Some(c) = standardize(&ind) {
                        columns.push(c);
                        column_parent.push(p_ix);
                    }
                }
            }
            _ => {
                return Err(Error::Schema(format!(
                    "predictor '{name}' cannot enter the design matrix"
                )))
            }
        }
    }
    let mut x = Matrix::zeros(n, columns.len());
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x.set(i, j, v);
        }
    }
    Ok(DesignMatrix {
        x,
        column_parent,
        parents: predictors.to_vec(),
    })
}

/// Zero-mean unit-variance scaling; constant columns return None and drop.
fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return None;
    }
    let sd = var.sqrt();
    Some(values.iter().map(|v| (v - mean) / sd).collect())
}

// ---------------------------------------------------------------------------
// Screening
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenOutcome {
    pub selected: Vec<String>,
    pub deviance_at_selection: f64,
    /// True when the achievable deviance was negligible and the screen
    /// reduced to the null model.
    pub null_model: bool,
}

/// Retain the support of the first path entry explaining
/// `threshold * d_star`, where d_star is the deviance explained at the
/// smallest lambda. Indicator columns collapse back to their parent name.
pub fn screen_predictors(
    path: &LassoPath,
    design: &DesignMatrix,
    threshold: f64,
) -> ScreenOutcome {
    let d_star = *path.deviance_explained.last().unwrap_or(&0.0);
    if d_star <= NULL_DEVIANCE_FLOOR {
        return ScreenOutcome {
            selected: Vec::new(),
            deviance_at_selection: d_star.max(0.0),
            null_model: true,
        };
    }
    let target = threshold * d_star;
    let entry = path
        .deviance_explained
        .iter()
        .position(|&d| d >= target)
        .unwrap_or(path.deviance_explained.len() - 1);
    let mut parents = BTreeSet::new();
    for col in path.support(entry) {
        parents.insert(design.column_parent[col]);
    }
    ScreenOutcome {
        selected: parents
            .into_iter()
            .map(|p| design.parents[p].clone())
            .collect(),
        deviance_at_selection: path.deviance_explained[entry],
        null_model: false,
    }
}
