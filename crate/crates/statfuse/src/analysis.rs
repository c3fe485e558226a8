//! Pooled estimation over implicates: weighted means, proportions, sums,
//! counts, and medians for optional subgroups, with Rubin-pooled variance,
//! optional replicate-weight augmentation, and margins of error.
//!
//! Within-implicate standard errors: means use the Gatz-Smith form of
//! Cochran's ratio variance approximation; proportions use the effective
//! sample size generalization of the unweighted formula; medians use a
//! large-N density approximation when the sample supports it and a weighted
//! bootstrap otherwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microdata::{ColumnData, ColumnKind, Microdata};
use crate::pipeline::{ImplicateSet, SimColumn};
use crate::rng::SplitMix64;
use crate::stats::{norm_pdf, norm_quantile, t_quantile, weighted_median, weighted_quantile};

pub const DEFAULT_CONFIDENCE: f64 = 0.90;
/// Replication factor for the successive-difference convention.
pub const DEFAULT_REPLICATION_FACTOR: f64 = 4.0;
const BOOTSTRAP_RESAMPLES: usize = 200;
const LARGE_N_MIN_ROWS: usize = 100;
const LARGE_N_MIN_DISTINCT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeFlag {
    /// Fewer than two observations: no defined standard error.
    UndefinedSe,
    /// Proportion exactly 0 or 1.
    Boundary,
    /// Median SE came from the bootstrap path.
    Bootstrap,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimateSe {
    pub estimate: f64,
    pub se: f64,
    pub flag: Option<SeFlag>,
}

/// Weighted mean with the Gatz-Smith ratio variance approximation.
pub fn weighted_mean_se(values: &[f64], weights: &[f64]) -> EstimateSe {
    assert_eq!(values.len(), weights.len());
    let n = values.len();
    let w_sum: f64 = weights.iter().sum();
    let estimate = values
        .iter()
        .zip(weights)
        .map(|(&y, &w)| w * y)
        .sum::<f64>()
        / w_sum;
    if n < 2 {
        return EstimateSe {
            estimate,
            se: f64::NAN,
            flag: Some(SeFlag::UndefinedSe),
        };
    }
    let nf = n as f64;
    let w_bar = w_sum / nf;
    let mut acc = 0.0;
    for (&y, &w) in values.iter().zip(weights) {
        let a = w * y - w_bar * estimate;
        let b = w - w_bar;
        acc += a * a - 2.0 * estimate * b * a + estimate * estimate * b * b;
    }
    let var = nf / ((nf - 1.0) * w_sum * w_sum) * acc;
    EstimateSe {
        estimate,
        se: var.max(0.0).sqrt(),
        flag: None,
    }
}

/// Weighted proportion with SE from the effective sample size
/// n_eff = (sum w)^2 / sum w^2.
pub fn proportion_se(indicator: &[f64], weights: &[f64]) -> EstimateSe {
    assert_eq!(indicator.len(), weights.len());
    debug_assert!(indicator.iter().all(|&v| v == 0.0 || v == 1.0));
    let w_sum: f64 = weights.iter().sum();
    let w2_sum: f64 = weights.iter().map(|w| w * w).sum();
    let p = indicator
        .iter()
        .zip(weights)
        .map(|(&y, &w)| w * y)
        .sum::<f64>()
        / w_sum;
    if p <= 0.0 || p >= 1.0 {
        return EstimateSe {
            estimate: p,
            se: 0.0,
            flag: Some(SeFlag::Boundary),
        };
    }
    let n_eff = w_sum * w_sum / w2_sum;
    EstimateSe {
        estimate: p,
        se: (p * (1.0 - p) / n_eff).sqrt(),
        flag: None,
    }
}

/// Weighted median; large-N approximation SE = 1 / (2 f(m) sqrt(n_eff)) with
/// a kernel density estimate at the median when the sample is big and varied
/// enough, otherwise a 200-resample weighted bootstrap.
pub fn median_se(values: &[f64], weights: &[f64]) -> EstimateSe {
    assert_eq!(values.len(), weights.len());
    assert!(values.len() >= 2, "median_se needs n >= 2");
    let m = weighted_median(values, weights);
    let mut distinct = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if values.len() >= LARGE_N_MIN_ROWS && distinct.len() >= LARGE_N_MIN_DISTINCT {
        let w_sum: f64 = weights.iter().sum();
        let w2_sum: f64 = weights.iter().map(|w| w * w).sum();
        let n_eff = w_sum * w_sum / w2_sum;
        let mean = values
            .iter()
            .zip(weights)
            .map(|(&y, &w)| w * y)
            .sum::<f64>()
            / w_sum;
        let var = values
            .iter()
            .zip(weights)
            .map(|(&y, &w)| w * (y - mean) * (y - mean))
            .sum::<f64>()
            / w_sum;
        let sd = var.sqrt();
        let iqr = weighted_quantile(values, weights, 0.75) - weighted_quantile(values, weights, 0.25);
        let scale = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        if scale <= 0.0 {
            return EstimateSe {
                estimate: m,
                se: 0.0,
                flag: None,
            };
        }
        let h = 0.9 * scale * n_eff.powf(-0.2);
        let density = values
            .iter()
            .zip(weights)
            .map(|(&y, &w)| w * norm_pdf((y - m) / h))
            .sum::<f64>()
            / (w_sum * h);
        let se = 1.0 / (2.0 * density * n_eff.sqrt());
        EstimateSe {
            estimate: m,
            se,
            flag: None,
        }
    } else {
        // Weighted bootstrap: resample rows with replacement, keep weights.
        let n = values.len();
        let mut rng = SplitMix64::for_draw(0xb007, n as u64, distinct.len() as u64, 0);
        let mut medians = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
        let mut bv = vec![0.0; n];
        let mut bw = vec![0.0; n];
        for _ in 0..BOOTSTRAP_RESAMPLES {
            for i in 0..n {
                let j = rng.index(n);
                bv[i] = values[j];
                bw[i] = weights[j];
            }
            medians.push(weighted_median(&bv, &bw));
        }
        let mb = medians.iter().sum::<f64>() / medians.len() as f64;
        let var = medians.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>()
            / (medians.len() - 1) as f64;
        EstimateSe {
            estimate: m,
            se: var.sqrt(),
            flag: Some(SeFlag::Bootstrap),
        }
    }
}

// ---------------------------------------------------------------------------
// Rubin pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledEstimate {
    /// Conjunction label like "race=b&tenure=owner"; empty for full sample.
    pub subgroup: String,
    /// Target level for proportion/count statistics.
    pub level: Option<String>,
    pub point: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    pub replicate_var: f64,
    pub moe: f64,
    pub df: f64,
    pub n_implicates: usize,
    pub suppressed: bool,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Rubin's pooling of per-implicate (estimate, se) pairs at a confidence
/// level; `extra_var` is added into T before the MOE (replicate-weight
/// augmentation).
pub fn pool_rubin(per_implicate: &[(f64, f64)], confidence: f64, extra_var: f64) -> PooledEstimate {
    assert!(!per_implicate.is_empty());
    let m = per_implicate.len();
    let mf = m as f64;
    let point = per_implicate.iter().map(|&(e, _)| e).sum::<f64>() / mf;
    let within = per_implicate.iter().map(|&(_, s)| s * s).sum::<f64>() / mf;
    let (between, mut flags) = if m >= 2 {
        let b = per_implicate
            .iter()
            .map(|&(e, _)| (e - point) * (e - point))
            .sum::<f64>()
            / (mf - 1.0);
        (b, Vec::new())
    } else {
        (0.0, vec!["single_implicate_unpooled".to_string()])
    };
    let total = within + (1.0 + 1.0 / mf) * between + extra_var;
    let q = 0.5 * (1.0 + confidence);
    let (df, quantile) = if between > 0.0 && m >= 2 {
        let df = (mf - 1.0) * {
            let r = 1.0 + mf * within / ((mf + 1.0) * between);
            r * r
        };
        if df > 1e4 {
            (df, norm_quantile(q))
        } else {
            (df, t_quantile(q, df))
        }
    } else {
        (f64::INFINITY, norm_quantile(q))
    };
    let moe = quantile * total.max(0.0).sqrt();
    if !moe.is_finite() {
        flags.push("undefined_moe".to_string());
    }
    PooledEstimate {
        subgroup: String::new(),
        level: None,
        point,
        within_var: within,
        between_var: between,
        total_var: total,
        replicate_var: extra_var,
        moe,
        df,
        n_implicates: m,
        suppressed: false,
        flags,
    }
}

/// Additional variance from replicate-weight estimates:
/// V_add = c * (1/M) * sum_m (theta_rep_m - theta_m)^2.
pub fn replicate_weight_variance(primary: &[f64], replicate: &[f64], factor: f64) -> f64 {
    assert_eq!(primary.len(), replicate.len());
    if primary.is_empty() {
        return 0.0;
    }
    let m = primary.len() as f64;
    factor
        * primary
            .iter()
            .zip(replicate)
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum::<f64>()
        / m
}

// ---------------------------------------------------------------------------
// Analysis driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Proportion,
    Sum,
    Count,
    Median,
}

impl std::str::FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "proportion" => Ok(Statistic::Proportion),
            "sum" => Ok(Statistic::Sum),
            "count" => Ok(Statistic::Count),
            "median" => Ok(Statistic::Median),
            other => Err(Error::InvalidArgument(format!("unknown statistic '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisRequest {
    pub statistic: Statistic,
    pub variable: String,
    pub subgroup_by: Vec<String>,
    pub use_replicate_weights: bool,
    pub confidence: f64,
    pub replication_factor: f64,
}

impl AnalysisRequest {
    pub fn new(statistic: Statistic, variable: &str) -> Self {
        AnalysisRequest {
            statistic,
            variable: variable.to_string(),
            subgroup_by: Vec::new(),
            use_replicate_weights: false,
            confidence: DEFAULT_CONFIDENCE,
            replication_factor: DEFAULT_REPLICATION_FACTOR,
        }
    }
}

/// One variable's values for one implicate: fused columns come from the
/// implicate, recipient columns are implicate-invariant.
enum VarView<'a> {
    Numeric(&'a [f64]),
    Categorical { codes: &'a [u32], levels: &'a [String] },
}

fn variable_view<'a>(
    implicates: &'a ImplicateSet,
    recipient: &'a Microdata,
    m: usize,
    name: &str,
) -> Result<VarView<'a>> {
    if let Some(v) = implicates.variable_index(name) {
        let spec = &implicates.variables[v];
        return Ok(match (&implicates.implicates[m][v], &spec.kind) {
            (SimColumn::Numeric(vals), _) => VarView::Numeric(vals),
            (SimColumn::Categorical(codes), ColumnKind::Categorical { levels }) => {
                VarView::Categorical { codes, levels }
            }
            _ => unreachable!("fused column kind aligns with spec"),
        });
    }
    match (recipient.column(name), recipient.spec(name)) {
        (Some(ColumnData::Numeric(vals)), _) => Ok(VarView::Numeric(vals)),
        (Some(ColumnData::Categorical(codes)), Some(spec)) => {
            let levels = spec.kind.levels().expect("categorical levels");
            Ok(VarView::Categorical { codes, levels })
        }
        _ => Err(Error::Schema(format!(
            "variable '{name}' is neither fused nor a recipient column"
        ))),
    }
}

/// Per-implicate subgroup assignment: label per row, or None for no grouping.
fn subgroup_labels(
    implicates: &ImplicateSet,
    recipient: &Microdata,
    m: usize,
    by: &[String],
) -> Result<Option<Vec<String>>> {
    if by.is_empty() {
        return Ok(None);
    }
    let n = recipient.n_rows();
    let mut labels = vec![String::new(); n];
    for name in by {
        let view = variable_view(implicates, recipient, m, name)?;
        let VarView::Categorical { codes, levels } = view else {
            return Err(Error::InvalidArgument(format!(
                "subgroup variable '{name}' must be categorical"
            )));
        };
        for i in 0..n {
            if !labels[i].is_empty() {
                labels[i].push('&');
            }
            labels[i].push_str(name);
            labels[i].push('=');
            labels[i].push_str(&levels[codes[i] as usize]);
        }
    }
    Ok(Some(labels))
}

struct CellEstimate {
    estimate: f64,
    se: f64,
    rep_estimate: Option<f64>,
}

/// Pooled estimates per subgroup (and per level for proportion/count).
pub fn estimate(
    implicates: &ImplicateSet,
    recipient: &Microdata,
    request: &AnalysisRequest,
) -> Result<Vec<PooledEstimate>> {
    if implicates.n_rows() != recipient.n_rows() {
        return Err(Error::InvalidArgument(
            "implicates and recipient row counts differ".into(),
        ));
    }
    let m_count = implicates.n_implicates();
    let weights = recipient.weights();
    let rep_weights = recipient.replicate_weights();
    let use_reps = request.use_replicate_weights && !rep_weights.is_empty();
    let mut missing_reps_flag = false;
    if request.use_replicate_weights && rep_weights.is_empty() {
        missing_reps_flag = true;
    }

    // (subgroup, level) -> per-implicate cells; BTreeMap keeps output order
    // deterministic.
    let mut cells: BTreeMap<(String, Option<String>), Vec<Option<CellEstimate>>> = BTreeMap::new();

    for m in 0..m_count {
        let labels = subgroup_labels(implicates, recipient, m, &request.subgroup_by)?;
        let groups: BTreeMap<String, Vec<usize>> = match &labels {
            None => {
                let mut g = BTreeMap::new();
                g.insert(String::new(), (0..recipient.n_rows()).collect());
                g
            }
            Some(labels) => {
                let mut g: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for (i, l) in labels.iter().enumerate() {
                    g.entry(l.clone()).or_default().push(i);
                }
                g
            }
        };
        let rep_w: Option<&[f64]> = if use_reps {
            Some(rep_weights[m % rep_weights.len()])
        } else {
            None
        };

        for (label, rows) in groups {
            let w: Vec<f64> = rows.iter().map(|&i| weights[i]).collect();
            let rw: Option<Vec<f64>> = rep_w.map(|r| rows.iter().map(|&i| r[i]).collect());
            let view = variable_view(implicates, recipient, m, &request.variable)?;
            match (&request.statistic, &view) {
                (Statistic::Mean | Statistic::Sum | Statistic::Median, VarView::Numeric(vals)) => {
                    let y: Vec<f64> = rows.iter().map(|&i| vals[i]).collect();
                    let cell = numeric_cell(&request.statistic, &y, &w, rw.as_deref());
                    push_cell(&mut cells, (label.clone(), None), m, m_count, cell);
                }
                (
                    Statistic::Proportion | Statistic::Count,
                    VarView::Categorical { codes, levels },
                ) => {
                    let target_codes: Vec<u32> = rows.iter().map(|&i| codes[i]).collect();
                    for (l_ix, level) in levels.iter().enumerate() {
                        let ind: Vec<f64> = target_codes
                            .iter()
                            .map(|&c| f64::from(c as usize == l_ix))
                            .collect();
                        let cell =
                            share_cell(&request.statistic, &ind, &w, rw.as_deref());
                        push_cell(
                            &mut cells,
                            (label.clone(), Some(level.clone())),
                            m,
                            m_count,
                            cell,
                        );
                    }
                }
                (Statistic::Mean | Statistic::Sum | Statistic::Median, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "statistic {:?} needs a numeric variable",
                        request.statistic
                    )))
                }
                (Statistic::Proportion | Statistic::Count, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "statistic {:?} needs a categorical variable",
                        request.statistic
                    )))
                }
            }
        }
    }

    let mut out = Vec::with_capacity(cells.len());
    for ((subgroup, level), per_implicate) in cells {
        // A subgroup empty in any implicate is suppressed.
        if per_implicate.iter().any(|c| c.is_none()) {
            out.push(PooledEstimate {
                subgroup,
                level,
                point: f64::NAN,
                within_var: f64::NAN,
                between_var: f64::NAN,
                total_var: f64::NAN,
                replicate_var: 0.0,
                moe: f64::NAN,
                df: f64::NAN,
                n_implicates: m_count,
                suppressed: true,
                flags: vec!["empty_in_some_implicate".to_string()],
            });
            continue;
        }
        let pairs: Vec<(f64, f64)> = per_implicate
            .iter()
            .map(|c| {
                let c = c.as_ref().unwrap();
                (c.estimate, c.se)
            })
            .collect();
        let v_add = if use_reps {
            let primary: Vec<f64> = pairs.iter().map(|&(e, _)| e).collect();
            let reps: Vec<f64> = per_implicate
                .iter()
                .map(|c| {
                    let c = c.as_ref().unwrap();
                    c.rep_estimate.unwrap_or(c.estimate)
                })
                .collect();
            replicate_weight_variance(&primary, &reps, request.replication_factor)
        } else {
            0.0
        };
        let mut pooled = pool_rubin(&pairs, request.confidence, v_add);
        pooled.subgroup = subgroup;
        pooled.level = level;
        if missing_reps_flag {
            pooled.flags.push("replicate_weights_missing".to_string());
        }
        out.push(pooled);
    }
    Ok(out)
}

fn numeric_cell(
    statistic: &Statistic,
    y: &[f64],
    w: &[f64],
    rep_w: Option<&[f64]>,
) -> CellEstimate {
    let w_sum: f64 = w.iter().sum();
    let base = match statistic {
        Statistic::Mean => weighted_mean_se(y, w),
        Statistic::Sum => {
            let m = weighted_mean_se(y, w);
            EstimateSe {
                estimate: m.estimate * w_sum,
                se: m.se * w_sum,
                flag: m.flag,
            }
        }
        Statistic::Median => median_se(y, w),
        _ => unreachable!("share statistics handled elsewhere"),
    };
    let rep_estimate = rep_w.map(|rw| {
        let rw_sum: f64 = rw.iter().sum();
        if rw_sum <= 0.0 {
            return base.estimate;
        }
        match statistic {
            Statistic::Mean => {
                y.iter().zip(rw).map(|(&a, &b)| a * b).sum::<f64>() / rw_sum
            }
            Statistic::Sum => y.iter().zip(rw).map(|(&a, &b)| a * b).sum::<f64>(),
            Statistic::Median => weighted_median(y, rw),
            _ => unreachable!(),
        }
    });
    CellEstimate {
        estimate: base.estimate,
        se: if base.se.is_nan() { 0.0 } else { base.se },
        rep_estimate,
    }
}

fn share_cell(
    statistic: &Statistic,
    indicator: &[f64],
    w: &[f64],
    rep_w: Option<&[f64]>,
) -> CellEstimate {
    let w_sum: f64 = w.iter().sum();
    let p = proportion_se(indicator, w);
    let base = match statistic {
        Statistic::Proportion => p,
        Statistic::Count => EstimateSe {
            estimate: p.estimate * w_sum,
            se: p.se * w_sum,
            flag: p.flag,
        },
        _ => unreachable!(),
    };
    let rep_estimate = rep_w.map(|rw| {
        let rw_sum: f64 = rw.iter().sum();
        if rw_sum <= 0.0 {
            return base.estimate;
        }
        let share = indicator.iter().zip(rw).map(|(&a, &b)| a * b).sum::<f64>() / rw_sum;
        match statistic {
            Statistic::Proportion => share,
            Statistic::Count => share * rw_sum,
            _ => unreachable!(),
        }
    });
    CellEstimate {
        estimate: base.estimate,
        se: base.se,
        rep_estimate,
    }
}

fn push_cell(
    cells: &mut BTreeMap<(String, Option<String>), Vec<Option<CellEstimate>>>,
    key: (String, Option<String>),
    m: usize,
    m_count: usize,
    cell: CellEstimate,
) {
    let slot = cells.entry(key).or_insert_with(|| {
        let mut v = Vec::with_capacity(m_count);
        v.resize_with(m_count, || None);
        v
    });
    slot[m] = Some(cell);
}

/// CSV rendering of pooled estimates (one row per subgroup x level).
pub fn estimates_to_csv(statistic: Statistic, variable: &str, rows: &[PooledEstimate]) -> String {
    let stat = match statistic {
        Statistic::Mean => "mean",
        Statistic::Proportion => "proportion",
        Statistic::Sum => "sum",
        Statistic::Count => "count",
        Statistic::Median => "median",
    };
    let mut out = String::from(
        "statistic,variable,subgroup,level,point,moe,within_var,between_var,replicate_var,total_var,df,implicates,suppressed,flags\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{stat},{variable},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.subgroup,
            r.level.as_deref().unwrap_or(""),
            r.point,
            r.moe,
            r.within_var,
            r.between_var,
            r.replicate_var,
            r.total_var,
            r.df,
            r.n_implicates,
            r.suppressed,
            r.flags.join(";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bootstrap_mean_se_oracle(values: &[f64], weights: &[f64], resamples: usize) -> f64 {
        let n = values.len();
        let mut rng = SplitMix64::new(0x0bac1e);
        let mut means = Vec::with_capacity(resamples);
        for _ in 0..resamples {
            let mut num = 0.0;
            let mut den = 0.0;
            for _ in 0..n {
                let j = rng.index(n);
                num += weights[j] * values[j];
                den += weights[j];
            }
            means.push(num / den);
        }
        let mb = means.iter().sum::<f64>() / means.len() as f64;
        (means.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
    }

    #[test]
    fn equal_weights_reduce_to_classic_se() {
        let mut rng = SplitMix64::new(1);
        let n = 500;
        let y: Vec<f64> = (0..n).map(|_| rng.normal() * 3.0 + 1.0).collect();
        let w = vec![3.7; n];
        let got = weighted_mean_se(&y, &w);
        let mean = y.iter().sum::<f64>() / n as f64;
        let s2 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let classic = (s2 / n as f64).sqrt();
        assert!(
            (got.se - classic).abs() <= 1e-12 * classic,
            "{} vs {}",
            got.se,
            classic
        );
        assert!((got.estimate - mean).abs() <= 1e-12 * mean.abs());
    }

    #[test]
    fn constant_values_zero_se() {
        let y = vec![4.2; 50];
        let w: Vec<f64> = (0..50).map(|i| 1.0 + i as f64).collect();
        let got = weighted_mean_se(&y, &w);
        assert!(got.se.abs() < 1e-12);
        assert_eq!(got.estimate, 4.2);
    }

    #[test]
    fn single_observation_flags_undefined_se() {
        let got = weighted_mean_se(&[1.0], &[2.0]);
        assert_eq!(got.flag, Some(SeFlag::UndefinedSe));
        assert!(got.se.is_nan());
    }

    #[test]
    fn gatz_smith_tracks_bootstrap_oracle() {
        // Median relative deviation over 50 weighted samples within 10%.
        let mut rng = SplitMix64::new(7);
        let mut rel = Vec::new();
        for _ in 0..50 {
            let n = 200;
            let y: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0 + 5.0).collect();
            let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform() * 2.0).collect();
            let got = weighted_mean_se(&y, &w);
            let oracle = bootstrap_mean_se_oracle(&y, &w, 10_000);
            rel.push((got.se - oracle).abs() / oracle);
        }
        rel.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = rel[rel.len() / 2];
        assert!(med < 0.10, "median relative deviation {med}");
    }

    #[test]
    fn proportion_reduces_and_hits_arithmetic_case() {
        // Equal weights: n_eff = n.
        let ind: Vec<f64> = (0..100).map(|i| f64::from(i < 37)).collect();
        let w = vec![2.0; 100];
        let got = proportion_se(&ind, &w);
        let classic = (0.37f64 * 0.63 / 100.0).sqrt();
        assert!((got.se - classic).abs() < 1e-12 * classic);
        // p = 0.5 with n_eff = 100 gives exactly 0.05.
        let ind2: Vec<f64> = (0..100).map(|i| f64::from(i % 2 == 0)).collect();
        let got2 = proportion_se(&ind2, &vec![1.0; 100]);
        assert!((got2.se - 0.05).abs() < 1e-15);
    }

    #[test]
    fn proportion_boundary_flags() {
        let got = proportion_se(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!(got.flag, Some(SeFlag::Boundary));
        assert_eq!(got.se, 0.0);
    }

    #[test]
    fn proportion_tracks_bootstrap_oracle() {
        let mut rng = SplitMix64::new(8);
        let mut rel = Vec::new();
        for _ in 0..30 {
            let n = 300;
            let ind: Vec<f64> = (0..n).map(|_| f64::from(rng.uniform() < 0.4)).collect();
            let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform() * 2.0).collect();
            let got = proportion_se(&ind, &w);
            let oracle = bootstrap_mean_se_oracle(&ind, &w, 10_000);
            if oracle > 0.0 {
                rel.push((got.se - oracle).abs() / oracle);
            }
        }
        rel.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = rel[rel.len() / 2];
        assert!(med < 0.15, "median relative deviation {med}");
    }

    #[test]
    fn median_large_n_matches_asymptotic_rate() {
        // SE of the median of a normal sample: 1.2533 sigma / sqrt(n).
        let mut rng = SplitMix64::new(9);
        let n = 10_000;
        let sigma = 2.5;
        let y: Vec<f64> = (0..n).map(|_| rng.normal() * sigma).collect();
        let w = vec![1.0; n];
        let got = median_se(&y, &w);
        let want = 1.2533 * sigma / (n as f64).sqrt();
        assert!(got.flag.is_none(), "large-N path expected");
        assert!(
            (got.se - want).abs() / want < 0.15,
            "se {} vs asymptotic {want}",
            got.se
        );
    }

    #[test]
    fn median_small_n_takes_bootstrap_path() {
        let y = vec![1.0, 5.0, 2.0, 8.0, 3.0, 9.0, 4.0, 7.0, 6.0, 2.5];
        let w = vec![1.0; 10];
        let got = median_se(&y, &w);
        assert_eq!(got.flag, Some(SeFlag::Bootstrap));
        assert!(got.se > 0.0);
    }

    #[test]
    fn median_constant_zero_se() {
        let y = vec![3.0; 150];
        let w = vec![1.0; 150];
        let got = median_se(&y, &w);
        assert_eq!(got.se, 0.0);
    }

    #[test]
    fn rubin_two_implicate_arithmetic() {
        let pooled = pool_rubin(&[(1.0, 1.0), (3.0, 1.0)], 0.90, 0.0);
        assert_eq!(pooled.point, 2.0);
        assert_eq!(pooled.within_var, 1.0);
        assert_eq!(pooled.between_var, 2.0);
        assert_eq!(pooled.total_var, 4.0);
        assert!((pooled.total_var.sqrt() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rubin_zero_between_uses_normal_quantile() {
        let pooled = pool_rubin(&[(2.0, 0.5), (2.0, 0.5), (2.0, 0.5)], 0.90, 0.0);
        assert_eq!(pooled.between_var, 0.0);
        assert_eq!(pooled.total_var, 0.25);
        let want = norm_quantile(0.95) * 0.5;
        assert!((pooled.moe - want).abs() < 1e-12, "{} vs {want}", pooled.moe);
    }

    #[test]
    fn rubin_total_never_below_within_and_moe_monotone() {
        let mut rng = SplitMix64::new(10);
        for _ in 0..200 {
            let m = 2 + rng.index(10);
            let pairs: Vec<(f64, f64)> = (0..m)
                .map(|_| (rng.normal(), 0.1 + rng.uniform()))
                .collect();
            let base = pool_rubin(&pairs, 0.90, 0.0);
            assert!(base.total_var >= base.within_var - 1e-12);
            let bumped = pool_rubin(&pairs, 0.90, 0.3);
            assert!(bumped.moe >= base.moe, "V_add must not shrink the MOE");
            assert!((bumped.total_var - base.total_var - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_point_invariant_to_implicate_order() {
        let pairs = [(1.0, 0.3), (4.0, 0.5), (2.5, 0.2)];
        let mut rev = pairs;
        rev.reverse();
        let a = pool_rubin(&pairs, 0.90, 0.0);
        let b = pool_rubin(&rev, 0.90, 0.0);
        assert_eq!(a.point, b.point);
        assert!((a.moe - b.moe).abs() < 1e-12);
    }

    #[test]
    fn single_implicate_unpooled_with_warning() {
        let pooled = pool_rubin(&[(5.0, 1.5)], 0.90, 0.0);
        assert_eq!(pooled.point, 5.0);
        assert_eq!(pooled.between_var, 0.0);
        assert!(pooled.flags.iter().any(|f| f.contains("single_implicate")));
    }

    #[test]
    fn replicate_variance_zero_when_identical_and_positive_otherwise() {
        assert_eq!(
            replicate_weight_variance(&[1.0, 2.0], &[1.0, 2.0], 4.0),
            0.0
        );
        let v = replicate_weight_variance(&[1.0, 2.0], &[1.5, 1.5], 4.0);
        assert!((v - 4.0 * (0.25 + 0.25) / 2.0).abs() < 1e-15);
    }
}
