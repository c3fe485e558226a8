//! Synthetic-population generator with closed-form conditional truth, plus
//! recovery scoring against that truth. Truth is carried analytically (never
//! re-estimated), so end-to-end tolerances are Monte-Carlo-only.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::analysis::{estimate, pool_rubin, proportion_se, AnalysisRequest, Statistic};
use crate::error::{Error, Result};
use crate::gbdt::sigmoid;
use crate::microdata::{ColumnData, ColumnKind, ColumnRole, ColumnSpec, Microdata};
use crate::pipeline::ImplicateSet;
use crate::rng::SplitMix64;
use crate::stats::norm_quantile;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorGen {
    Continuous { name: String, mean: f64, sd: f64 },
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<f64>,
    },
}

impl PredictorGen {
    pub fn name(&self) -> &str {
        match self {
            PredictorGen::Continuous { name, .. } => name,
            PredictorGen::Categorical { name, .. } => name,
        }
    }
}

/// Linear predictor: intercept + continuous coefficients + per-level offsets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearForm {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
    /// Per categorical predictor: one offset per level, in level order.
    #[serde(default)]
    pub level_effects: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "link", rename_all = "snake_case")]
pub enum ResponseLink {
    /// Z = form(x) + noise_sd * eps.
    Linear { form: LinearForm, noise_sd: f64 },
    /// Class probabilities are the softmax of per-class forms.
    LogisticMulticlass {
        levels: Vec<String>,
        class_forms: Vec<LinearForm>,
    },
    /// With probability sigmoid(zero_form(x)) the outcome is zero; otherwise
    /// magnitude_form(x) + noise.
    ZeroInflated {
        zero_form: LinearForm,
        magnitude_form: LinearForm,
        noise_sd: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDef {
    pub name: String,
    #[serde(flatten)]
    pub link: ResponseLink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub population: usize,
    pub donor_rows: usize,
    pub recipient_rows: usize,
    pub seed: u64,
    #[serde(default = "default_weight_scheme")]
    pub weight_scheme: WeightScheme,
    #[serde(default)]
    pub replicate_count: usize,
    #[serde(default)]
    pub replicate_scale: f64,
    #[serde(rename = "predictor")]
    pub predictors: Vec<PredictorGen>,
    #[serde(rename = "response")]
    pub responses: Vec<ResponseDef>,
}

fn default_weight_scheme() -> WeightScheme {
    WeightScheme::Uniform
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.donor_rows + self.recipient_rows > self.population {
            return Err(Error::InvalidArgument(
                "donor + recipient rows exceed the population".into(),
            ));
        }
        for p in &self.predictors {
            if let PredictorGen::Categorical { levels, probs, .. } = p {
                if levels.len() != probs.len() || levels.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "predictor '{}' levels/probs mismatch",
                        p.name()
                    )));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 || probs.iter().any(|&q| q < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "predictor '{}' probabilities must sum to 1",
                        p.name()
                    )));
                }
            }
        }
        for r in &self.responses {
            match &r.link {
                ResponseLink::Linear { noise_sd, .. }
                | ResponseLink::ZeroInflated { noise_sd, .. } => {
                    if *noise_sd < 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "response '{}' has negative noise",
                            r.name
                        )));
                    }
                }
                ResponseLink::LogisticMulticlass {
                    levels,
                    class_forms,
                } => {
                    if levels.len() < 2 || levels.len() != class_forms.len() {
                        return Err(Error::InvalidArgument(format!(
                            "response '{}' needs one form per class",
                            r.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Schema(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Truth
// ---------------------------------------------------------------------------

/// Analytic conditional moments for every response, evaluated on any table
/// carrying the predictor columns.
#[derive(Debug, Clone)]
pub struct Truth {
    pub responses: Vec<ResponseDef>,
}

impl Truth {
    fn response(&self, var: &str) -> Result<&ResponseDef> {
        self.responses
            .iter()
            .find(|r| r.name == var)
            .ok_or_else(|| Error::InvalidArgument(format!("no response named '{var}'")))
    }

    /// E[Z | X] for one row.
    pub fn conditional_mean(&self, var: &str, md: &Microdata, row: usize) -> Result<f64> {
        let def = self.response(var)?;
        Ok(match &def.link {
            ResponseLink::Linear { form, .. } => eval_form(form, md, row)?,
            ResponseLink::ZeroInflated {
                zero_form,
                magnitude_form,
                ..
            } => {
                let p_zero = sigmoid(eval_form(zero_form, md, row)?);
                (1.0 - p_zero) * eval_form(magnitude_form, md, row)?
            }
            ResponseLink::LogisticMulticlass { .. } => {
                return Err(Error::InvalidArgument(
                    "conditional_mean is undefined for class responses".into(),
                ))
            }
        })
    }

    /// Conditional quantile of Z | X (linear responses only).
    pub fn conditional_quantile(
        &self,
        var: &str,
        md: &Microdata,
        row: usize,
        p: f64,
    ) -> Result<f64> {
        let def = self.response(var)?;
        match &def.link {
            ResponseLink::Linear { form, noise_sd } => {
                Ok(eval_form(form, md, row)? + noise_sd * norm_quantile(p))
            }
            _ => Err(Error::InvalidArgument(
                "conditional quantiles available for linear responses only".into(),
            )),
        }
    }

    pub fn class_probabilities(&self, var: &str, md: &Microdata, row: usize) -> Result<Vec<f64>> {
        let def = self.response(var)?;
        let ResponseLink::LogisticMulticlass { class_forms, .. } = &def.link else {
            return Err(Error::InvalidArgument(format!(
                "response '{var}' is not a class response"
            )));
        };
        let logits: Vec<f64> = class_forms
            .iter()
            .map(|f| eval_form(f, md, row))
            .collect::<Result<_>>()?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn zero_probability(&self, var: &str, md: &Microdata, row: usize) -> Result<f64> {
        let def = self.response(var)?;
        let ResponseLink::ZeroInflated { zero_form, .. } = &def.link else {
            return Err(Error::InvalidArgument(format!(
                "response '{var}' is not zero-inflated"
            )));
        };
        Ok(sigmoid(eval_form(zero_form, md, row)?))
    }

    /// Weighted mean of E[Z|X] over a row subset (None = all rows).
    pub fn weighted_mean(&self, var: &str, md: &Microdata, rows: Option<&[usize]>) -> Result<f64> {
        let all: Vec<usize> = (0..md.n_rows()).collect();
        let rows = rows.unwrap_or(&all);
        let w = md.weights();
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in rows {
            num += w[i] * self.conditional_mean(var, md, i)?;
            den += w[i];
        }
        Ok(num / den)
    }

    /// Weighted population share of one class level.
    pub fn weighted_class_share(
        &self,
        var: &str,
        md: &Microdata,
        level_ix: usize,
        rows: Option<&[usize]>,
    ) -> Result<f64> {
        let all: Vec<usize> = (0..md.n_rows()).collect();
        let rows = rows.unwrap_or(&all);
        let w = md.weights();
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in rows {
            num += w[i] * self.class_probabilities(var, md, i)?[level_ix];
            den += w[i];
        }
        Ok(num / den)
    }

    /// Weighted population zero share of a zero-inflated response.
    pub fn weighted_zero_share(
        &self,
        var: &str,
        md: &Microdata,
        rows: Option<&[usize]>,
    ) -> Result<f64> {
        let all: Vec<usize> = (0..md.n_rows()).collect();
        let rows = rows.unwrap_or(&all);
        let w = md.weights();
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in rows {
            num += w[i] * self.zero_probability(var, md, i)?;
            den += w[i];
        }
        Ok(num / den)
    }
}

fn eval_form(form: &LinearForm, md: &Microdata, row: usize) -> Result<f64> {
    let mut v = form.intercept;
    for (name, coef) in &form.coefficients {
        v += coef * md.numeric(name)?[row];
    }
    for (name, effects) in &form.level_effects {
        let code = md.categorical(name)?[row] as usize;
        let offset = effects.get(code).ok_or_else(|| {
            Error::InvalidArgument(format!("level effects for '{name}' shorter than its levels"))
        })?;
        v += offset;
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Draw the population, split disjoint donor/recipient samples, and return
/// them with the analytic truth.
pub fn generate_population(config: &SynthConfig) -> Result<(Microdata, Microdata, Truth)> {
    config.validate()?;
    let n = config.population;
    let mut rng = SplitMix64::for_draw(config.seed, 0, 0, 0x5e9);

    // Predictor columns over the whole population.
    let mut pred_numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut pred_codes: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for p in &config.predictors {
        match p {
            PredictorGen::Continuous { name, mean, sd } => {
                pred_numeric.insert(
                    name.clone(),
                    (0..n).map(|_| mean + sd * rng.normal()).collect(),
                );
            }
            PredictorGen::Categorical { name, probs, .. } => {
                let mut cum = Vec::with_capacity(probs.len());
                let mut acc = 0.0;
                for &q in probs {
                    acc += q;
                    cum.push(acc);
                }
                pred_codes.insert(
                    name.clone(),
                    (0..n)
                        .map(|_| {
                            let u = rng.uniform();
                            cum.iter().position(|&c| u < c).unwrap_or(probs.len() - 1) as u32
                        })
                        .collect(),
                );
            }
        }
    }

    // Weights.
    let weights: Vec<f64> = match config.weight_scheme {
        WeightScheme::Uniform => vec![1.0; n],
        WeightScheme::Gamma => {
            let gamma = Gamma::<f64>::new(4.0, 0.25).expect("valid gamma");
            (0..n).map(|_| gamma.sample(&mut rng).max(1e-3)).collect()
        }
    };
    // Replicate weights perturb the primary weights.
    let replicates: Vec<Vec<f64>> = (0..config.replicate_count)
        .map(|_| {
            weights
                .iter()
                .map(|&w| w * (1.0 + config.replicate_scale * rng.normal()).max(0.05))
                .collect()
        })
        .collect();

    // A scratch table so forms can evaluate on the population.
    let scratch = assemble(
        config,
        &(0..n).collect::<Vec<usize>>(),
        &pred_numeric,
        &pred_codes,
        &weights,
        &[],
        &BTreeMap::new(),
        "p",
        false,
    )?;

    // Responses over the whole population.
    let mut responses: BTreeMap<String, ColumnData> = BTreeMap::new();
    for def in &config.responses {
        match &def.link {
            ResponseLink::Linear { form, noise_sd } => {
                let vals: Vec<f64> = (0..n)
                    .map(|i| Ok(eval_form(form, &scratch, i)? + noise_sd * rng.normal()))
                    .collect::<Result<_>>()?;
                responses.insert(def.name.clone(), ColumnData::Numeric(vals));
            }
            ResponseLink::LogisticMulticlass { class_forms, .. } => {
                let truth = Truth {
                    responses: vec![def.clone()],
                };
                let _ = class_forms;
                let codes: Vec<u32> = (0..n)
                    .map(|i| {
                        let probs = truth.class_probabilities(&def.name, &scratch, i)?;
                        let u: f64 = rng.gen::<f64>();
                        let mut acc = 0.0;
                        for (k, &p) in probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                return Ok(k as u32);
                            }
                        }
                        Ok(probs.len() as u32 - 1)
                    })
                    .collect::<Result<_>>()?;
                responses.insert(def.name.clone(), ColumnData::Categorical(codes));
            }
            ResponseLink::ZeroInflated {
                zero_form,
                magnitude_form,
                noise_sd,
            } => {
                let vals: Vec<f64> = (0..n)
                    .map(|i| {
                        let p_zero = sigmoid(eval_form(zero_form, &scratch, i)?);
                        if rng.uniform() < p_zero {
                            Ok(0.0)
                        } else {
                            Ok(eval_form(magnitude_form, &scratch, i)? + noise_sd * rng.normal())
                        }
                    })
                    .collect::<Result<_>>()?;
                responses.insert(def.name.clone(), ColumnData::Numeric(vals));
            }
        }
    }

    // Disjoint donor/recipient samples.
    let perm = rng.permutation(n);
    let donor_rows: Vec<usize> = perm[..config.donor_rows].to_vec();
    let recipient_rows: Vec<usize> =
        perm[config.donor_rows..config.donor_rows + config.recipient_rows].to_vec();

    let donor = assemble(
        config,
        &donor_rows,
        &pred_numeric,
        &pred_codes,
        &weights,
        &[],
        &responses,
        "d",
        true,
    )?;
    let recipient = assemble(
        config,
        &recipient_rows,
        &pred_numeric,
        &pred_codes,
        &weights,
        &replicates,
        &BTreeMap::new(),
        "r",
        true,
    )?;
    let truth = Truth {
        responses: config.responses.clone(),
    };
    Ok((donor, recipient, truth))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    config: &SynthConfig,
    rows: &[usize],
    pred_numeric: &BTreeMap<String, Vec<f64>>,
    pred_codes: &BTreeMap<String, Vec<u32>>,
    weights: &[f64],
    replicates: &[Vec<f64>],
    responses: &BTreeMap<String, ColumnData>,
    id_prefix: &str,
    with_id: bool,
) -> Result<Microdata> {
    let mut specs = Vec::new();
    let mut data = Vec::new();
    if with_id {
        specs.push(ColumnSpec {
            name: "hid".into(),
            kind: ColumnKind::Continuous,
            role: ColumnRole::Id,
        });
        data.push(ColumnData::Id(
            rows.iter()
                .enumerate()
                .map(|(i, _)| format!("{id_prefix}{i:07}"))
                .collect(),
        ));
    }
    for p in &config.predictors {
        match p {
            PredictorGen::Continuous { name, .. } => {
                specs.push(ColumnSpec::continuous(name, ColumnRole::Predictor));
                let src = &pred_numeric[name];
                data.push(ColumnData::Numeric(rows.iter().map(|&i| src[i]).collect()));
            }
            PredictorGen::Categorical { name, levels, .. } => {
                specs.push(ColumnSpec::categorical(
                    name,
                    &levels.iter().map(String::as_str).collect::<Vec<_>>(),
                    ColumnRole::Predictor,
                ));
                let src = &pred_codes[name];
                data.push(ColumnData::Categorical(
                    rows.iter().map(|&i| src[i]).collect(),
                ));
            }
        }
    }
    specs.push(ColumnSpec::continuous("weight", ColumnRole::Weight));
    data.push(ColumnData::Numeric(
        rows.iter().map(|&i| weights[i]).collect(),
    ));
    for (r, rep) in replicates.iter().enumerate() {
        specs.push(ColumnSpec::continuous(
            &format!("rep_{}", r + 1),
            ColumnRole::ReplicateWeight,
        ));
        data.push(ColumnData::Numeric(rows.iter().map(|&i| rep[i]).collect()));
    }
    for def in &config.responses {
        if let Some(col) = responses.get(&def.name) {
            let (kind, column) = match (&def.link, col) {
                (ResponseLink::Linear { .. }, ColumnData::Numeric(v)) => (
                    ColumnKind::Continuous,
                    ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
                ),
                (ResponseLink::ZeroInflated { .. }, ColumnData::Numeric(v)) => (
                    ColumnKind::Semicontinuous,
                    ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
                ),
                (ResponseLink::LogisticMulticlass { levels, .. }, ColumnData::Categorical(v)) => (
                    ColumnKind::Categorical {
                        levels: levels.clone(),
                    },
                    ColumnData::Categorical(rows.iter().map(|&i| v[i]).collect()),
                ),
                _ => unreachable!("response storage matches its link"),
            };
            specs.push(ColumnSpec {
                name: def.name.clone(),
                kind,
                role: ColumnRole::Fusion,
            });
            data.push(column);
        }
    }
    Microdata::from_columns(specs, data)
}

// ---------------------------------------------------------------------------
// Recovery scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub variable: String,
    pub subset: String,
    pub metric: String,
    pub truth: f64,
    pub estimate: f64,
    pub moe: f64,
    pub abs_error: f64,
    pub covered: bool,
}

/// Score fused implicates against the analytic truth: full-sample rows plus
/// one row per subgroup cell when `subgroup_by` is non-empty.
pub fn score_recovery(
    implicates: &ImplicateSet,
    recipient: &Microdata,
    truth: &Truth,
    subgroup_by: &[String],
) -> Result<Vec<RecoveryRow>> {
    let mut rows = Vec::new();
    for def in &truth.responses {
        if implicates.variable_index(&def.name).is_none() {
            continue;
        }
        match &def.link {
            ResponseLink::Linear { .. } | ResponseLink::ZeroInflated { .. } => {
                let mut req = AnalysisRequest::new(Statistic::Mean, &def.name);
                req.subgroup_by = subgroup_by.to_vec();
                for est in estimate(implicates, recipient, &req)? {
                    if est.suppressed {
                        continue;
                    }
                    let subset_rows = subset_rows(recipient, &est.subgroup)?;
                    let t = truth.weighted_mean(&def.name, recipient, subset_rows.as_deref())?;
                    rows.push(recovery_row(&def.name, &est.subgroup, "mean", t, est.point, est.moe));
                }
                if matches!(def.link, ResponseLink::ZeroInflated { .. }) {
                    // Pooled zero share vs analytic zero probability.
                    let m_count = implicates.n_implicates();
                    let w = recipient.weights();
                    let pairs: Vec<(f64, f64)> = (0..m_count)
                        .map(|m| {
                            let sim = implicates.numeric(m, &def.name)?;
                            let ind: Vec<f64> =
                                sim.iter().map(|&v| f64::from(v == 0.0)).collect();
                            let e = proportion_se(&ind, w);
                            Ok((e.estimate, e.se))
                        })
                        .collect::<Result<_>>()?;
                    let pooled = pool_rubin(&pairs, 0.90, 0.0);
                    let t = truth.weighted_zero_share(&def.name, recipient, None)?;
                    rows.push(recovery_row(
                        &def.name,
                        "",
                        "zero_share",
                        t,
                        pooled.point,
                        pooled.moe,
                    ));
                }
            }
            ResponseLink::LogisticMulticlass { levels, .. } => {
                let mut req = AnalysisRequest::new(Statistic::Proportion, &def.name);
                req.subgroup_by = subgroup_by.to_vec();
                for est in estimate(implicates, recipient, &req)? {
                    if est.suppressed {
                        continue;
                    }
                    let level = est.level.clone().unwrap_or_default();
                    let level_ix = levels
                        .iter()
                        .position(|l| *l == level)
                        .ok_or_else(|| Error::InvalidArgument(format!("level '{level}'")))?;
                    let subset_rows = subset_rows(recipient, &est.subgroup)?;
                    let t = truth.weighted_class_share(
                        &def.name,
                        recipient,
                        level_ix,
                        subset_rows.as_deref(),
                    )?;
                    rows.push(recovery_row(
                        &def.name,
                        &est.subgroup,
                        &format!("share[{level}]"),
                        t,
                        est.point,
                        est.moe,
                    ));
                }
            }
        }
    }
    Ok(rows)
}

fn recovery_row(
    variable: &str,
    subset: &str,
    metric: &str,
    truth: f64,
    estimate: f64,
    moe: f64,
) -> RecoveryRow {
    let abs_error = (estimate - truth).abs();
    RecoveryRow {
        variable: variable.to_string(),
        subset: subset.to_string(),
        metric: metric.to_string(),
        truth,
        estimate,
        moe,
        abs_error,
        covered: abs_error <= moe,
    }
}

/// Rows matching a subgroup conjunction label ("" = all rows).
fn subset_rows(md: &Microdata, label: &str) -> Result<Option<Vec<usize>>> {
    if label.is_empty() {
        return Ok(None);
    }
    let mut keep: Vec<bool> = vec![true; md.n_rows()];
    for clause in label.split('&') {
        let (var, level) = clause
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad subgroup label '{label}'")))?;
        let codes = md.categorical(var)?;
        let levels = md
            .spec(var)
            .and_then(|s| s.kind.levels())
            .ok_or_else(|| Error::Schema(format!("'{var}' is not categorical")))?;
        let ix = levels
            .iter()
            .position(|l| l == level)
            .ok_or_else(|| Error::InvalidArgument(format!("level '{level}' of '{var}'")))?
            as u32;
        for (i, &c) in codes.iter().enumerate() {
            keep[i] &= c == ix;
        }
    }
    Ok(Some(
        keep.iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect(),
    ))
}

/// Joint-frequency error for a fused block: max absolute difference between
/// the fused and donor weighted joint distributions over a tercile grid.
pub fn block_joint_frequency_error(
    implicates: &ImplicateSet,
    recipient: &Microdata,
    donor: &Microdata,
    vars: &[String],
) -> Result<f64> {
    const BINS: usize = 3;
    let mut edges = Vec::new();
    for var in vars {
        let z = donor.numeric(var)?;
        let mut sorted = z.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cut = |q: f64| sorted[((sorted.len() as f64 * q) as usize).min(sorted.len() - 1)];
        edges.push([cut(1.0 / 3.0), cut(2.0 / 3.0)]);
    }
    let bin_of = |v: f64, e: &[f64; 2]| -> usize {
        if v <= e[0] {
            0
        } else if v <= e[1] {
            1
        } else {
            2
        }
    };
    let n_cells = BINS.pow(vars.len() as u32);

    let mut donor_freq = vec![0.0; n_cells];
    let dw = donor.weights();
    for i in 0..donor.n_rows() {
        let mut cell = 0;
        for (v, var) in vars.iter().enumerate() {
            cell = cell * BINS + bin_of(donor.numeric(var)?[i], &edges[v]);
        }
        donor_freq[cell] += dw[i];
    }
    normalize(&mut donor_freq);

    let mut fused_freq = vec![0.0; n_cells];
    let rw = recipient.weights();
    for m in 0..implicates.n_implicates() {
        for i in 0..recipient.n_rows() {
            let mut cell = 0;
            for (v, var) in vars.iter().enumerate() {
                cell = cell * BINS + bin_of(implicates.numeric(m, var)?[i], &edges[v]);
            }
            fused_freq[cell] += rw[i];
        }
    }
    normalize(&mut fused_freq);

    Ok(donor_freq
        .iter()
        .zip(&fused_freq)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        for x in v.iter_mut() {
            *x /= total;
        }
    }
}
