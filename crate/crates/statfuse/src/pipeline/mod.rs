//! Training and fusion orchestration: per-variable model fitting, sequential
//! chaining, block fusion, zero-inflation, and multi-implicate simulation
//! with chunked prediction.
//!
//! Training fits objective-appropriate ensembles per fusion variable (one
//! classifier for categoricals; a mean model plus p quantile models for
//! continuous; a zero/nonzero classifier plus conditional machinery for
//! semicontinuous), predicts expectations back onto the donor, robust-scales
//! them, and builds variable-k donor pools. Fusion walks recipient chunks,
//! simulating steps in order so later models consume earlier simulated
//! values; every draw comes from an RNG stream keyed by (seed, implicate,
//! row id, step), which makes output invariant to chunking and parallelism.

mod bundle;
mod implicates;

pub use bundle::{load_bundle, save_bundle, Manifest, ScreenRecord};
pub use implicates::{
    load_implicates, DiskSink, ImplicateSet, ImplicateSink, MemorySink, OutputFormat, SimColumn,
};

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{
    fit_gbm_with_report, FeatureColumn, FeatureFrame, Objective, Target, TrainParams, TreeEnsemble,
};
use crate::matchcore::{
    build_donor_pools, robust_scale_apply, robust_scale_fit, sigma_floor_for, DonorPools, KdTree,
    PoolBuildConfig, ScalingParams,
};
use crate::matrix::Matrix;
use crate::microdata::{
    check_compatibility, ColumnData, ColumnKind, ColumnRole, ColumnSpec, CompatReport, Microdata,
};
use crate::prescreen::{
    build_design, lasso_path, screen_predictors, Family, Response, ScreenOutcome,
    SCREEN_THRESHOLD,
};
use crate::rng::{row_key, SplitMix64};

pub const DEFAULT_PERCENTILES: [f64; 3] = [0.166, 0.5, 0.833];
pub const DEFAULT_K: usize = 500;
pub const DEFAULT_BLOCK_K: usize = 10;
pub const DEFAULT_IMPLICATES: usize = 40;
pub const DEFAULT_CHUNK_ROWS: usize = 50_000;

// ---------------------------------------------------------------------------
// Fusion spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FusionStep {
    Single(String),
    Block(Vec<String>),
}

impl FusionStep {
    pub fn variables(&self) -> Vec<&str> {
        match self {
            FusionStep::Single(v) => vec![v.as_str()],
            FusionStep::Block(vs) => vs.iter().map(|s| s.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub steps: Vec<FusionStep>,
    pub percentiles: Vec<f64>,
    pub k_neighbors: usize,
    pub block_k: usize,
    pub implicates: usize,
    pub seed: u64,
    pub reduction: Option<usize>,
    pub chunk_rows: usize,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec {
            steps: Vec::new(),
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            k_neighbors: DEFAULT_K,
            block_k: DEFAULT_BLOCK_K,
            implicates: DEFAULT_IMPLICATES,
            seed: 0,
            reduction: None,
            chunk_rows: DEFAULT_CHUNK_ROWS,
        }
    }
}

impl FusionSpec {
    pub fn single_steps(vars: &[&str]) -> Self {
        FusionSpec {
            steps: vars
                .iter()
                .map(|v| FusionStep::Single(v.to_string()))
                .collect(),
            ..FusionSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("fusion spec has no steps".into()));
        }
        let mut seen = HashSet::new();
        for step in &self.steps {
            let vars = step.variables();
            if vars.is_empty() {
                return Err(Error::InvalidArgument("empty block step".into()));
            }
            for v in vars {
                if !seen.insert(v.to_string()) {
                    return Err(Error::InvalidArgument(format!(
                        "variable '{v}' appears in more than one step"
                    )));
                }
            }
        }
        if self.percentiles.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two percentiles".into(),
            ));
        }
        for w in self.percentiles.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(
                    "percentiles must be strictly increasing".into(),
                ));
            }
        }
        if !(self.percentiles[0] > 0.0 && *self.percentiles.last().unwrap() < 1.0) {
            return Err(Error::InvalidArgument(
                "percentiles must lie strictly inside (0,1)".into(),
            ));
        }
        if self.implicates == 0 {
            return Err(Error::InvalidArgument("implicates must be >= 1".into()));
        }
        if self.k_neighbors == 0 || self.block_k == 0 || self.chunk_rows == 0 {
            return Err(Error::InvalidArgument(
                "k, block_k, and chunk_rows must be positive".into(),
            ));
        }
        Ok(())
    }

    /// All fusion variables in fused order.
    pub fn fusion_variables(&self) -> Vec<String> {
        self.steps
            .iter()
            .flat_map(|s| s.variables().into_iter().map(str::to_string))
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SpecFile =
            toml::from_str(text).map_err(|e| Error::Schema(format!("fusion spec: {e}")))?;
        let spec = FusionSpec {
            steps: file
                .step
                .into_iter()
                .map(|s| {
                    if s.variables.len() == 1 {
                        FusionStep::Single(s.variables.into_iter().next().unwrap())
                    } else {
                        FusionStep::Block(s.variables)
                    }
                })
                .collect(),
            percentiles: file.percentiles,
            k_neighbors: file.k,
            block_k: file.block_k,
            implicates: file.implicates,
            seed: file.seed,
            reduction: file.reduction,
            chunk_rows: file.chunk_rows,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        let file = SpecFile {
            percentiles: self.percentiles.clone(),
            k: self.k_neighbors,
            block_k: self.block_k,
            implicates: self.implicates,
            seed: self.seed,
            reduction: self.reduction,
            chunk_rows: self.chunk_rows,
            step: self
                .steps
                .iter()
                .map(|s| SpecStep {
                    variables: s.variables().iter().map(|v| v.to_string()).collect(),
                })
                .collect(),
        };
        toml::to_string_pretty(&file).expect("spec serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    #[serde(default = "default_percentiles")]
    percentiles: Vec<f64>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_block_k")]
    block_k: usize,
    #[serde(default = "default_implicates")]
    implicates: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reduction: Option<usize>,
    #[serde(default = "default_chunk_rows")]
    chunk_rows: usize,
    step: Vec<SpecStep>,
}

#[derive(Serialize, Deserialize)]
struct SpecStep {
    variables: Vec<String>,
}

fn default_percentiles() -> Vec<f64> {
    DEFAULT_PERCENTILES.to_vec()
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_block_k() -> usize {
    DEFAULT_BLOCK_K
}
fn default_implicates() -> usize {
    DEFAULT_IMPLICATES
}
fn default_chunk_rows() -> usize {
    DEFAULT_CHUNK_ROWS
}

/// Compatibility report for a (donor, recipient, spec) triple.
pub fn compatibility(
    donor: &Microdata,
    recipient: &Microdata,
    spec: &FusionSpec,
) -> CompatReport {
    let predictors: Vec<String> = donor
        .names_with_role(ColumnRole::Predictor)
        .iter()
        .map(|s| s.to_string())
        .collect();
    check_compatibility(donor, recipient, &predictors, &spec.fusion_variables())
}

// ---------------------------------------------------------------------------
// Trained bundle
// ---------------------------------------------------------------------------

/// Conditional-expectation machinery for one continuous (sub-)variable.
#[derive(Debug, Clone)]
pub struct ContinuousMachinery {
    pub mean_model: TreeEnsemble,
    pub quantile_models: Vec<TreeEnsemble>,
    pub scaling: ScalingParams,
    pub pools: DonorPools,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone)]
pub enum BlockVarModels {
    Categorical { model: TreeEnsemble },
    Continuous {
        mean_model: TreeEnsemble,
        quantile_models: Vec<TreeEnsemble>,
    },
    Semicontinuous {
        zero_model: TreeEnsemble,
        mean_model: TreeEnsemble,
        quantile_models: Vec<TreeEnsemble>,
    },
}

#[derive(Debug, Clone)]
pub enum StepModels {
    Categorical {
        model: TreeEnsemble,
    },
    Continuous(ContinuousMachinery),
    Semicontinuous {
        zero_model: TreeEnsemble,
        /// None when the donor held no (or too few) nonzero observations.
        cont: Option<ContinuousMachinery>,
    },
    Block {
        vars: Vec<BlockVarModels>,
        scaling: ScalingParams,
        donor_scaled: Matrix,
        donor_records: Vec<SimColumn>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainedStep {
    pub step: FusionStep,
    pub screens: Vec<ScreenRecord>,
    pub models: StepModels,
}

#[derive(Debug, Clone)]
pub struct FusionBundle {
    pub spec: FusionSpec,
    /// Column specs of the fusion variables, in fused order.
    pub fusion_specs: Vec<ColumnSpec>,
    pub steps: Vec<TrainedStep>,
    pub manifest: Manifest,
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainContext<'a> {
    donor: &'a Microdata,
    predictors: Vec<String>,
    params: &'a TrainParams,
    spec: &'a FusionSpec,
    /// Fusion variables already simulated (chained features).
    chain: Vec<String>,
    manifest: Manifest,
}

impl<'a> TrainContext<'a> {
    /// LASSO-screen predictors for one response, then append chain variables.
    fn screen(&mut self, var: &str, response: Response, family: Family) -> Result<(Vec<String>, ScreenRecord)> {
        let design = build_design(self.donor, &self.predictors)?;
        let outcome = if design.x.n_cols() == 0 || self.donor.n_rows() < 10 {
            ScreenOutcome {
                selected: Vec::new(),
                deviance_at_selection: 0.0,
                null_model: true,
            }
        } else {
            let path = lasso_path(&design.x, &response, family, None)?;
            screen_predictors(&path, &design, SCREEN_THRESHOLD)
        };
        let mut features = outcome.selected.clone();
        features.extend(self.chain.iter().cloned());
        let record = ScreenRecord {
            variable: var.to_string(),
            predictors: outcome.selected,
            deviance: outcome.deviance_at_selection,
            null_model: outcome.null_model,
        };
        Ok((features, record))
    }

    fn screen_subset(
        &mut self,
        var: &str,
        rows: &[usize],
        response: Response,
        family: Family,
    ) -> Result<(Vec<String>, ScreenRecord)> {
        // Build the design on the row subset by re-hosting the donor columns.
        let sub = subset_microdata(self.donor, rows)?;
        let design = build_design(&sub, &self.predictors)?;
        let outcome = if design.x.n_cols() == 0 || rows.len() < 10 {
            ScreenOutcome {
                selected: Vec::new(),
                deviance_at_selection: 0.0,
                null_model: true,
            }
        } else {
            let path = lasso_path(&design.x, &response, family, None)?;
            screen_predictors(&path, &design, SCREEN_THRESHOLD)
        };
        let mut features = outcome.selected.clone();
        features.extend(self.chain.iter().cloned());
        let record = ScreenRecord {
            variable: var.to_string(),
            predictors: outcome.selected,
            deviance: outcome.deviance_at_selection,
            null_model: outcome.null_model,
        };
        Ok((features, record))
    }

    fn fit(
        &mut self,
        features: &[String],
        target: Target,
        objective: Objective,
        rows: Option<&[usize]>,
    ) -> Result<TreeEnsemble> {
        let (frame, weights) = match rows {
            None => (
                FeatureFrame::from_microdata(self.donor, features)?,
                self.donor.weights().to_vec(),
            ),
            Some(rows) => {
                let sub = subset_microdata(self.donor, rows)?;
                (
                    FeatureFrame::from_microdata(&sub, features)?,
                    sub.weights().to_vec(),
                )
            }
        };
        let (model, _report) =
            fit_gbm_with_report(&frame, &target, &weights, objective, self.params)?;
        if model.degenerate {
            self.manifest.entries.insert(
                format!("degenerate.{}", self.manifest.entries.len()),
                format!("{objective:?} model fell back to a constant predictor"),
            );
        }
        Ok(model)
    }

    /// Predict expectation columns [mean, quantiles...] for rows of a table.
    fn expectations(
        &self,
        mean_model: &TreeEnsemble,
        quantile_models: &[TreeEnsemble],
        table: &Microdata,
    ) -> Result<Matrix> {
        let mut parts = Vec::with_capacity(1 + quantile_models.len());
        let frame = FeatureFrame::from_microdata(table, &mean_model.feature_names)?;
        parts.push(mean_model.predict(&frame)?);
        for qm in quantile_models {
            let frame = FeatureFrame::from_microdata(table, &qm.feature_names)?;
            parts.push(qm.predict(&frame)?);
        }
        Ok(Matrix::hcat(&parts.iter().collect::<Vec<_>>()))
    }
}

/// Train conditional models and matching machinery for every fusion step.
pub fn train_fusion(
    donor: &Microdata,
    spec: &FusionSpec,
    params: &TrainParams,
) -> Result<FusionBundle> {
    spec.validate()?;
    let fusion_vars = spec.fusion_variables();
    let mut fusion_specs = Vec::with_capacity(fusion_vars.len());
    for var in &fusion_vars {
        let cs = donor
            .spec(var)
            .ok_or_else(|| Error::Schema(format!("fusion variable '{var}' not in donor")))?;
        if cs.role != ColumnRole::Fusion {
            return Err(Error::Schema(format!(
                "variable '{var}' does not have the fusion role in the donor schema"
            )));
        }
        fusion_specs.push(cs.clone());
    }

    let predictors: Vec<String> = donor
        .names_with_role(ColumnRole::Predictor)
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut ctx = TrainContext {
        donor,
        predictors,
        params,
        spec,
        chain: Vec::new(),
        manifest: Manifest::new(),
    };
    ctx.manifest
        .entries
        .insert("donor.rows".into(), donor.n_rows().to_string());

    let mut steps = Vec::with_capacity(spec.steps.len());
    for step in &spec.steps {
        let trained = match step {
            FusionStep::Single(var) => train_single(&mut ctx, var)?,
            FusionStep::Block(vars) => train_block(&mut ctx, vars)?,
        };
        ctx.chain
            .extend(step.variables().into_iter().map(str::to_string));
        steps.push(trained);
    }

    Ok(FusionBundle {
        spec: spec.clone(),
        fusion_specs,
        steps,
        manifest: ctx.manifest,
    })
}

fn train_single(ctx: &mut TrainContext<'_>, var: &str) -> Result<TrainedStep> {
    let kind = ctx.donor.spec(var).unwrap().kind.clone();
    let step = FusionStep::Single(var.to_string());
    match kind {
        ColumnKind::Categorical { levels } => {
            let codes = ctx.donor.categorical(var)?.to_vec();
            let family = if levels.len() == 2 {
                Family::Binomial
            } else {
                Family::Multinomial {
                    n_classes: levels.len(),
                }
            };
            let (features, screen) = ctx.screen(var, Response::Classes(codes.clone()), family)?;
            let objective = if levels.len() == 2 {
                Objective::BinaryLogloss
            } else {
                Objective::MulticlassLogloss {
                    n_classes: levels.len(),
                }
            };
            let model = ctx.fit(&features, Target::Classes(codes), objective, None)?;
            Ok(TrainedStep {
                step,
                screens: vec![screen],
                models: StepModels::Categorical { model },
            })
        }
        ColumnKind::Continuous => {
            let z = ctx.donor.numeric(var)?.to_vec();
            let (features, screen) =
                ctx.screen(var, Response::Values(z.clone()), Family::Gaussian)?;
            let machinery = train_continuous_machinery(ctx, &features, &z, None)?;
            Ok(TrainedStep {
                step,
                screens: vec![screen],
                models: StepModels::Continuous(machinery),
            })
        }
        ColumnKind::Semicontinuous => {
            let z = ctx.donor.numeric(var)?.to_vec();
            let indicator: Vec<u32> = z.iter().map(|&v| u32::from(v != 0.0)).collect();
            let (zero_features, zero_screen) =
                ctx.screen(var, Response::Classes(indicator.clone()), Family::Binomial)?;
            let zero_model = ctx.fit(
                &zero_features,
                Target::Classes(indicator.clone()),
                Objective::BinaryLogloss,
                None,
            )?;
            let nonzero_rows: Vec<usize> = (0..z.len()).filter(|&i| z[i] != 0.0).collect();
            let min_rows = ctx.params.folds.max(10);
            let (cont, mut screens) = if nonzero_rows.len() >= min_rows {
                let zm: Vec<f64> = nonzero_rows.iter().map(|&i| z[i]).collect();
                let (mag_features, mag_screen) = ctx.screen_subset(
                    var,
                    &nonzero_rows,
                    Response::Values(zm.clone()),
                    Family::Gaussian,
                )?;
                let machinery =
                    train_continuous_machinery(ctx, &mag_features, &zm, Some(&nonzero_rows))?;
                (Some(machinery), vec![zero_screen, mag_screen])
            } else {
                ctx.manifest.entries.insert(
                    format!("semicontinuous.{var}"),
                    format!(
                        "only {} nonzero donor rows; conditional stage skipped",
                        nonzero_rows.len()
                    ),
                );
                (None, vec![zero_screen])
            };
            let step_screens = std::mem::take(&mut screens);
            Ok(TrainedStep {
                step,
                screens: step_screens,
                models: StepModels::Semicontinuous { zero_model, cont },
            })
        }
    }
}

/// Fit mean + quantile models on (optionally a row subset of) the donor,
/// predict expectations back, scale, and build donor pools.
fn train_continuous_machinery(
    ctx: &mut TrainContext<'_>,
    features: &[String],
    z: &[f64],
    rows: Option<&[usize]>,
) -> Result<ContinuousMachinery> {
    let mean_model = ctx.fit(
        features,
        Target::Values(z.to_vec()),
        Objective::SquaredError,
        rows,
    )?;
    let mut quantile_models = Vec::with_capacity(ctx.spec.percentiles.len());
    for &p in &ctx.spec.percentiles {
        quantile_models.push(ctx.fit(
            features,
            Target::Values(z.to_vec()),
            Objective::Pinball { percentile: p },
            rows,
        )?);
    }
    let table = match rows {
        None => ctx.donor.clone(),
        Some(rows) => subset_microdata(ctx.donor, rows)?,
    };
    let db = ctx.expectations(&mean_model, &quantile_models, &table)?;
    let scaling = robust_scale_fit(&db);
    let db_scaled = robust_scale_apply(&scaling, &db);
    let sigma_floor = sigma_floor_for(z);
    let cfg = PoolBuildConfig {
        k: ctx.spec.k_neighbors,
        reduction: ctx.spec.reduction,
        percentiles: ctx.spec.percentiles.clone(),
        sigma_floor,
        seed: ctx.spec.seed,
    };
    let pools = build_donor_pools(&db, &db_scaled, &scaling, z, &cfg)?;
    if pools.k_clamped {
        ctx.manifest.entries.insert(
            "pools.k_clamped".into(),
            format!("K clamped to donor rows ({})", pools.k_used),
        );
    }
    Ok(ContinuousMachinery {
        mean_model,
        quantile_models,
        scaling,
        pools,
        sigma_floor,
    })
}

fn train_block(ctx: &mut TrainContext<'_>, vars: &[String]) -> Result<TrainedStep> {
    let mut var_models = Vec::with_capacity(vars.len());
    let mut screens = Vec::new();
    let mut expectation_parts: Vec<Matrix> = Vec::new();
    let mut donor_records = Vec::with_capacity(vars.len());

    for var in vars {
        let kind = ctx.donor.spec(var).unwrap().kind.clone();
        match kind {
            ColumnKind::Categorical { levels } => {
                let codes = ctx.donor.categorical(var)?.to_vec();
                donor_records.push(SimColumn::Categorical(codes.clone()));
                let family = if levels.len() == 2 {
                    Family::Binomial
                } else {
                    Family::Multinomial {
                        n_classes: levels.len(),
                    }
                };
                let (features, screen) =
                    ctx.screen(var, Response::Classes(codes.clone()), family)?;
                screens.push(screen);
                let objective = if levels.len() == 2 {
                    Objective::BinaryLogloss
                } else {
                    Objective::MulticlassLogloss {
                        n_classes: levels.len(),
                    }
                };
                let model = ctx.fit(&features, Target::Classes(codes), objective, None)?;
                // All v probability columns enter the block expectation space.
                let frame = FeatureFrame::from_microdata(ctx.donor, &model.feature_names)?;
                let probs = model.predict(&frame)?;
                expectation_parts.push(expand_binary_probs(&model, probs, levels.len()));
                var_models.push(BlockVarModels::Categorical { model });
            }
            ColumnKind::Continuous => {
                let z = ctx.donor.numeric(var)?.to_vec();
                donor_records.push(SimColumn::Numeric(z.clone()));
                let (features, screen) =
                    ctx.screen(var, Response::Values(z.clone()), Family::Gaussian)?;
                screens.push(screen);
                let mean_model = ctx.fit(
                    &features,
                    Target::Values(z.clone()),
                    Objective::SquaredError,
                    None,
                )?;
                let mut quantile_models = Vec::new();
                for &p in &ctx.spec.percentiles {
                    quantile_models.push(ctx.fit(
                        &features,
                        Target::Values(z.clone()),
                        Objective::Pinball { percentile: p },
                        None,
                    )?);
                }
                let db = ctx.expectations(&mean_model, &quantile_models, ctx.donor)?;
                expectation_parts.push(db);
                var_models.push(BlockVarModels::Continuous {
                    mean_model,
                    quantile_models,
                });
            }
            ColumnKind::Semicontinuous => {
                let z = ctx.donor.numeric(var)?.to_vec();
                donor_records.push(SimColumn::Numeric(z.clone()));
                let indicator: Vec<u32> = z.iter().map(|&v| u32::from(v != 0.0)).collect();
                let (zero_features, zero_screen) =
                    ctx.screen(var, Response::Classes(indicator.clone()), Family::Binomial)?;
                screens.push(zero_screen);
                let zero_model = ctx.fit(
                    &zero_features,
                    Target::Classes(indicator),
                    Objective::BinaryLogloss,
                    None,
                )?;
                let nonzero_rows: Vec<usize> = (0..z.len()).filter(|&i| z[i] != 0.0).collect();
                let zm: Vec<f64> = nonzero_rows.iter().map(|&i| z[i]).collect();
                let (mag_features, mag_screen) = ctx.screen_subset(
                    var,
                    &nonzero_rows,
                    Response::Values(zm.clone()),
                    Family::Gaussian,
                )?;
                screens.push(mag_screen);
                let mean_model = ctx.fit(
                    &mag_features,
                    Target::Values(zm.clone()),
                    Objective::SquaredError,
                    Some(&nonzero_rows),
                )?;
                let mut quantile_models = Vec::new();
                for &p in &ctx.spec.percentiles {
                    quantile_models.push(ctx.fit(
                        &mag_features,
                        Target::Values(zm.clone()),
                        Objective::Pinball { percentile: p },
                        Some(&nonzero_rows),
                    )?);
                }
                // Expectations on all donor rows: nonzero probability plus
                // the conditional mean/quantile columns.
                let zero_frame =
                    FeatureFrame::from_microdata(ctx.donor, &zero_model.feature_names)?;
                let p_nonzero = zero_model.predict(&zero_frame)?;
                let cond = ctx.expectations(&mean_model, &quantile_models, ctx.donor)?;
                expectation_parts.push(Matrix::hcat(&[&p_nonzero, &cond]));
                var_models.push(BlockVarModels::Semicontinuous {
                    zero_model,
                    mean_model,
                    quantile_models,
                });
            }
        }
    }

    let db = Matrix::hcat(&expectation_parts.iter().collect::<Vec<_>>());
    let scaling = robust_scale_fit(&db);
    let donor_scaled = robust_scale_apply(&scaling, &db);
    Ok(TrainedStep {
        step: FusionStep::Block(vars.to_vec()),
        screens,
        models: StepModels::Block {
            vars: var_models,
            scaling,
            donor_scaled,
            donor_records,
        },
    })
}

/// Binary models emit one probability column; expand to [P(level0), P(level1)]
/// so categorical block expectations always carry all v columns.
fn expand_binary_probs(model: &TreeEnsemble, probs: Matrix, n_levels: usize) -> Matrix {
    if matches!(model.objective, Objective::BinaryLogloss) {
        assert_eq!(n_levels, 2);
        let mut out = Matrix::zeros(probs.n_rows(), 2);
        for i in 0..probs.n_rows() {
            let p1 = probs.get(i, 0);
            out.set(i, 0, 1.0 - p1);
            out.set(i, 1, p1);
        }
        out
    } else {
        probs
    }
}

fn subset_microdata(md: &Microdata, rows: &[usize]) -> Result<Microdata> {
    let specs = md.specs().to_vec();
    let data: Vec<ColumnData> = specs
        .iter()
        .map(|s| match md.column(&s.name).unwrap() {
            ColumnData::Numeric(v) => {
                ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect())
            }
            ColumnData::Categorical(v) => {
                ColumnData::Categorical(rows.iter().map(|&i| v[i]).collect())
            }
            ColumnData::Id(v) => ColumnData::Id(rows.iter().map(|&i| v[i].clone()).collect()),
        })
        .collect();
    Microdata::from_columns(specs, data)
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// Renormalizing inverse-CDF draw over levels in declared order.
pub fn fuse_categorical(probabilities: &[f64], rng: &mut SplitMix64) -> usize {
    let sum: f64 = probabilities.iter().sum();
    debug_assert!(probabilities.iter().all(|&p| p >= 0.0));
    if sum <= 0.0 {
        return 0;
    }
    let draw = rng.uniform() * sum;
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

/// Nearest-anchor pool draw: scale the recipient's expectation row, match to
/// the single nearest anchor, then sample uniformly from its k* prefix.
pub fn fuse_continuous(
    expectations: &[f64],
    machinery: &ContinuousMachinery,
    tree: &KdTree<'_>,
    rng: &mut SplitMix64,
) -> f64 {
    let scaled: Vec<f64> = expectations
        .iter()
        .enumerate()
        .map(|(j, &x)| machinery.scaling.scale_value(j, x))
        .collect();
    let (ix, _) = tree.search(&scaled, 1, 0.0);
    let pool = &machinery.pools.pools[ix[0] as usize];
    let prefix = pool.prefix();
    prefix[rng.index(prefix.len())]
}

/// Two-stage semicontinuous draw: Bernoulli zero branch, then the continuous
/// machinery conditional on a nonzero outcome.
pub fn fuse_semicontinuous(
    zero_prob: f64,
    expectations: &[f64],
    machinery: Option<(&ContinuousMachinery, &KdTree<'_>)>,
    rng: &mut SplitMix64,
) -> f64 {
    let zero = rng.bernoulli(zero_prob.clamp(0.0, 1.0));
    if zero {
        return 0.0;
    }
    match machinery {
        Some((m, tree)) => fuse_continuous(expectations, m, tree, rng),
        None => 0.0,
    }
}

/// Fixed-k block draw: match in the concatenated expectation space and copy
/// one complete donor record.
pub fn fuse_block(
    scaled_row: &[f64],
    tree: &KdTree<'_>,
    block_k: usize,
    rng: &mut SplitMix64,
) -> usize {
    let k = block_k.min(tree_len(tree));
    let (ix, _) = tree.search(scaled_row, k, 0.0);
    ix[rng.index(ix.len())] as usize
}

fn tree_len(tree: &KdTree<'_>) -> usize {
    tree.n_points()
}

/// Fuse M implicates in memory.
pub fn fuse(
    bundle: &FusionBundle,
    recipient: &Microdata,
    implicates: usize,
    seed: u64,
) -> Result<ImplicateSet> {
    let mut sink = MemorySink::new();
    fuse_streaming(bundle, recipient, implicates, seed, &mut sink)?;
    Ok(sink.into_implicates())
}

/// Chunked fusion into an arbitrary sink. Recipient rows are processed in
/// chunks of `spec.chunk_rows`; draws are keyed by (seed, implicate, row id,
/// step), so output is identical for any chunk size or thread count.
pub fn fuse_streaming(
    bundle: &FusionBundle,
    recipient: &Microdata,
    implicates: usize,
    seed: u64,
    sink: &mut dyn ImplicateSink,
) -> Result<()> {
    if implicates == 0 {
        return Err(Error::InvalidArgument("implicates must be >= 1".into()));
    }
    sink.begin(&bundle.fusion_specs, recipient.n_rows(), implicates)?;

    // kd-trees over anchor matrices, built once per run.
    let trees: Vec<Vec<KdTree<'_>>> = bundle
        .steps
        .iter()
        .map(|s| match &s.models {
            StepModels::Continuous(m) => vec![KdTree::build(&m.pools.anchors_scaled)],
            StepModels::Semicontinuous { cont: Some(m), .. } => {
                vec![KdTree::build(&m.pools.anchors_scaled)]
            }
            StepModels::Block { donor_scaled, .. } => vec![KdTree::build(donor_scaled)],
            _ => Vec::new(),
        })
        .collect();

    let n = recipient.n_rows();
    let chunk_rows = bundle.spec.chunk_rows;
    let mut start = 0;
    while start < n {
        let end = (start + chunk_rows).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let chunk = subset_microdata(recipient, &rows)?;
        let ids: Vec<String> = rows.iter().map(|&i| recipient.row_id(i)).collect();
        let keys: Vec<u64> = ids.iter().map(|id| row_key(id)).collect();

        // Step-0 predictions carry no chained features, so they are shared
        // across implicates.
        let shared: Option<StepPredictions> = bundle
            .steps
            .first()
            .map(|s| predict_step(s, &chunk, None, &bundle.fusion_specs))
            .transpose()?;

        let results: Vec<Vec<SimColumn>> = (0..implicates)
            .into_par_iter()
            .map(|m| {
                simulate_chunk(bundle, &chunk, &keys, m as u64, seed, &trees, shared.as_ref())
            })
            .collect::<Result<_>>()?;
        for (m, columns) in results.into_iter().enumerate() {
            sink.write_chunk(m, &ids, &columns)?;
        }
        start = end;
    }
    sink.finish()
}

/// Raw model outputs for one step on one chunk, before any drawing.
enum StepPredictions {
    Categorical { probs: Matrix },
    Continuous { expectations: Matrix },
    Semicontinuous {
        p_nonzero: Vec<f64>,
        expectations: Option<Matrix>,
    },
    Block { scaled: Matrix },
}

fn frame_for(
    model: &TreeEnsemble,
    chunk: &Microdata,
    sim: Option<&BTreeMap<String, SimColumn>>,
    fusion_specs: &[ColumnSpec],
) -> Result<FeatureFrame> {
    let mut columns = Vec::with_capacity(model.feature_names.len());
    for name in &model.feature_names {
        if let Some(sim) = sim {
            if let Some(col) = sim.get(name) {
                let fc = match col {
                    SimColumn::Numeric(v) => FeatureColumn::Numeric(v.clone()),
                    SimColumn::Categorical(codes) => {
                        let spec = fusion_specs
                            .iter()
                            .find(|s| &s.name == name)
                            .expect("simulated column has a fusion spec");
                        FeatureColumn::Categorical {
                            codes: codes.clone(),
                            n_levels: spec.kind.levels().map(|l| l.len()).unwrap_or(0) as u32,
                        }
                    }
                };
                columns.push(fc);
                continue;
            }
        }
        let frame = FeatureFrame::from_microdata(chunk, std::slice::from_ref(name))?;
        columns.push(frame.columns.into_iter().next().unwrap());
    }
    FeatureFrame::new(model.feature_names.clone(), columns)
}

fn predict_step(
    step: &TrainedStep,
    chunk: &Microdata,
    sim: Option<&BTreeMap<String, SimColumn>>,
    fusion_specs: &[ColumnSpec],
) -> Result<StepPredictions> {
    match &step.models {
        StepModels::Categorical { model } => {
            let frame = frame_for(model, chunk, sim, fusion_specs)?;
            let probs = model.predict(&frame)?;
            Ok(StepPredictions::Categorical { probs })
        }
        StepModels::Continuous(m) => {
            let expectations =
                predict_expectations(&m.mean_model, &m.quantile_models, chunk, sim, fusion_specs)?;
            Ok(StepPredictions::Continuous { expectations })
        }
        StepModels::Semicontinuous { zero_model, cont } => {
            let frame = frame_for(zero_model, chunk, sim, fusion_specs)?;
            let p = zero_model.predict(&frame)?;
            let p_nonzero: Vec<f64> = (0..p.n_rows()).map(|i| p.get(i, 0)).collect();
            let expectations = match cont {
                Some(m) => Some(predict_expectations(
                    &m.mean_model,
                    &m.quantile_models,
                    chunk,
                    sim,
                    fusion_specs,
                )?),
                None => None,
            };
            Ok(StepPredictions::Semicontinuous {
                p_nonzero,
                expectations,
            })
        }
        StepModels::Block { vars, scaling, .. } => {
            let mut parts = Vec::new();
            for bv in vars {
                match bv {
                    BlockVarModels::Categorical { model } => {
                        let frame = frame_for(model, chunk, sim, fusion_specs)?;
                        let probs = model.predict(&frame)?;
                        let n_levels = match model.objective {
                            Objective::BinaryLogloss => 2,
                            Objective::MulticlassLogloss { n_classes } => n_classes,
                            _ => unreachable!("categorical block model"),
                        };
                        parts.push(expand_binary_probs(model, probs, n_levels));
                    }
                    BlockVarModels::Continuous {
                        mean_model,
                        quantile_models,
                    } => {
                        parts.push(predict_expectations(
                            mean_model,
                            quantile_models,
                            chunk,
                            sim,
                            fusion_specs,
                        )?);
                    }
                    BlockVarModels::Semicontinuous {
                        zero_model,
                        mean_model,
                        quantile_models,
                    } => {
                        let frame = frame_for(zero_model, chunk, sim, fusion_specs)?;
                        let p = zero_model.predict(&frame)?;
                        let cond = predict_expectations(
                            mean_model,
                            quantile_models,
                            chunk,
                            sim,
                            fusion_specs,
                        )?;
                        parts.push(Matrix::hcat(&[&p, &cond]));
                    }
                }
            }
            let concat = Matrix::hcat(&parts.iter().collect::<Vec<_>>());
            Ok(StepPredictions::Block {
                scaled: robust_scale_apply(scaling, &concat),
            })
        }
    }
}

fn predict_expectations(
    mean_model: &TreeEnsemble,
    quantile_models: &[TreeEnsemble],
    chunk: &Microdata,
    sim: Option<&BTreeMap<String, SimColumn>>,
    fusion_specs: &[ColumnSpec],
) -> Result<Matrix> {
    let mut parts = Vec::with_capacity(1 + quantile_models.len());
    let frame = frame_for(mean_model, chunk, sim, fusion_specs)?;
    parts.push(mean_model.predict(&frame)?);
    for qm in quantile_models {
        let frame = frame_for(qm, chunk, sim, fusion_specs)?;
        parts.push(qm.predict(&frame)?);
    }
    Ok(Matrix::hcat(&parts.iter().collect::<Vec<_>>()))
}

/// Simulate all steps for one implicate over one chunk.
fn simulate_chunk(
    bundle: &FusionBundle,
    chunk: &Microdata,
    keys: &[u64],
    implicate: u64,
    seed: u64,
    trees: &[Vec<KdTree<'_>>],
    shared_step0: Option<&StepPredictions>,
) -> Result<Vec<SimColumn>> {
    let n = chunk.n_rows();
    let mut sim: BTreeMap<String, SimColumn> = BTreeMap::new();
    let mut ordered: Vec<SimColumn> = Vec::new();

    for (step_ix, tstep) in bundle.steps.iter().enumerate() {
        let preds_owned;
        let preds = if step_ix == 0 {
            shared_step0.expect("step-0 predictions precomputed")
        } else {
            preds_owned = predict_step(tstep, chunk, Some(&sim), &bundle.fusion_specs)?;
            &preds_owned
        };
        match (&tstep.models, preds) {
            (StepModels::Categorical { model }, StepPredictions::Categorical { probs }) => {
                let var = &tstep.step.variables()[0];
                let mut out = Vec::with_capacity(n);
                let binary = matches!(model.objective, Objective::BinaryLogloss);
                for i in 0..n {
                    let mut rng =
                        SplitMix64::for_draw(seed, implicate, keys[i], step_ix as u64);
                    let level = if binary {
                        let p1 = probs.get(i, 0);
                        fuse_categorical(&[1.0 - p1, p1], &mut rng)
                    } else {
                        fuse_categorical(probs.row(i), &mut rng)
                    };
                    out.push(level as u32);
                }
                let col = SimColumn::Categorical(out);
                sim.insert(var.to_string(), col.clone());
                ordered.push(col);
            }
            (StepModels::Continuous(m), StepPredictions::Continuous { expectations }) => {
                let var = &tstep.step.variables()[0];
                let tree = &trees[step_ix][0];
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut rng =
                        SplitMix64::for_draw(seed, implicate, keys[i], step_ix as u64);
                    out.push(fuse_continuous(expectations.row(i), m, tree, &mut rng));
                }
                let col = SimColumn::Numeric(out);
                sim.insert(var.to_string(), col.clone());
                ordered.push(col);
            }
            (
                StepModels::Semicontinuous { cont, .. },
                StepPredictions::Semicontinuous {
                    p_nonzero,
                    expectations,
                },
            ) => {
                let var = &tstep.step.variables()[0];
                let machinery = cont
                    .as_ref()
                    .map(|m| (m, &trees[step_ix][0]));
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut rng =
                        SplitMix64::for_draw(seed, implicate, keys[i], step_ix as u64);
                    let zero_prob = 1.0 - p_nonzero[i];
                    let exp_row: &[f64] = match expectations {
                        Some(e) => e.row(i),
                        None => &[],
                    };
                    out.push(fuse_semicontinuous(zero_prob, exp_row, machinery, &mut rng));
                }
                let col = SimColumn::Numeric(out);
                sim.insert(var.to_string(), col.clone());
                ordered.push(col);
            }
            (
                StepModels::Block {
                    donor_records,
                    ..
                },
                StepPredictions::Block { scaled },
            ) => {
                let vars = tstep.step.variables();
                let tree = &trees[step_ix][0];
                let mut picks = Vec::with_capacity(n);
                for i in 0..n {
                    let mut rng =
                        SplitMix64::for_draw(seed, implicate, keys[i], step_ix as u64);
                    picks.push(fuse_block(scaled.row(i), tree, bundle.spec.block_k, &mut rng));
                }
                for (v_ix, var) in vars.iter().enumerate() {
                    let col = match &donor_records[v_ix] {
                        SimColumn::Numeric(vals) => {
                            SimColumn::Numeric(picks.iter().map(|&p| vals[p]).collect())
                        }
                        SimColumn::Categorical(codes) => {
                            SimColumn::Categorical(picks.iter().map(|&p| codes[p]).collect())
                        }
                    };
                    sim.insert(var.to_string(), col.clone());
                    ordered.push(col);
                }
            }
            _ => unreachable!("step predictions align with step models"),
        }
    }
    Ok(ordered)
}
