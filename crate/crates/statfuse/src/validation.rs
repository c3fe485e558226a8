//! Internal validation: fuse variables back onto the donor, compare observed
//! and simulated estimates across population subsets of varying size, and
//! emit percent-error, value-added, and MOE-ratio curves with a running
//! median smoother.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{pool_rubin, proportion_se, weighted_mean_se};
use crate::error::{Error, Result};
use crate::microdata::{ColumnKind, Microdata};
use crate::pipeline::{fuse, FusionBundle, ImplicateSet};
use crate::stats::norm_quantile;

pub const SUBSET_CAP: usize = 1_000_000;
/// Cells with |observed| below this are excluded from percent error.
pub const PCT_ERROR_FLOOR: f64 = 1e-9;
pub const SMOOTH_WINDOW_FRAC: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationCell {
    pub fusion_variable: String,
    /// Level name for categorical proportions, "zero_share" for the
    /// semicontinuous zero mass, empty for plain means.
    pub label: String,
    /// Conjunction like "race=b&edu=hs"; empty for the full sample.
    pub subset: String,
    /// Unweighted subset row count.
    pub n: usize,
    pub observed: f64,
    pub simulated: f64,
    pub observed_moe: f64,
    pub simulated_moe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    AbsPctError,
    ValueAdded,
    MoeRatio,
}

impl CurveMetric {
    pub fn all() -> [CurveMetric; 3] {
        [
            CurveMetric::AbsPctError,
            CurveMetric::ValueAdded,
            CurveMetric::MoeRatio,
        ]
    }

    pub fn file_stem(&self) -> &'static str {
        match self {
            CurveMetric::AbsPctError => "abs_pct_error",
            CurveMetric::ValueAdded => "value_added",
            CurveMetric::MoeRatio => "moe_ratio",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationCurve {
    pub metric: CurveMetric,
    pub variable: String,
    pub label: String,
    /// (subset size, metric value) pairs.
    pub points: Vec<(f64, f64)>,
    /// Running-median smooth over distinct subset sizes.
    pub smoothed: Vec<(f64, f64)>,
    /// Cells excluded for a near-zero denominator (percent error) or a
    /// non-positive observed MOE (MOE ratio).
    pub excluded: usize,
}

/// Fuse M implicates back onto the donor and compare observed vs simulated
/// estimates for every level combination of every non-empty subset of
/// `subset_vars` (plus the full-sample cell).
pub fn internal_validate(
    bundle: &FusionBundle,
    donor: &Microdata,
    subset_vars: &[String],
    implicates: usize,
    seed: u64,
) -> Result<Vec<ValidationCell>> {
    for var in subset_vars {
        let spec = donor
            .spec(var)
            .ok_or_else(|| Error::Schema(format!("subset variable '{var}' not in donor")))?;
        if !spec.kind.is_categorical() {
            return Err(Error::InvalidArgument(format!(
                "subset variable '{var}' must be categorical"
            )));
        }
    }
    let subsets = enumerate_subsets(donor, subset_vars)?;
    let simulated = fuse(bundle, donor, implicates, seed)?;

    let mut cells = Vec::new();
    for (subset_label, rows) in &subsets {
        for spec in &bundle.fusion_specs {
            cells.extend(compare_cells(
                donor,
                &simulated,
                spec.name.as_str(),
                &spec.kind,
                subset_label,
                rows,
            )?);
        }
    }
    Ok(cells)
}

/// All level-combination subsets over every non-empty subvariable set,
/// including the full-sample cell under the empty label.
fn enumerate_subsets(
    donor: &Microdata,
    subset_vars: &[String],
) -> Result<Vec<(String, Vec<usize>)>> {
    let n = donor.n_rows();
    let mut out: Vec<(String, Vec<usize>)> = vec![(String::new(), (0..n).collect())];
    let v = subset_vars.len();
    let mut total: usize = 1;
    for mask in 1u32..(1 << v) {
        let vars: Vec<&String> = (0..v)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| &subset_vars[i])
            .collect();
        let mut cell_count = 1usize;
        for var in &vars {
            let levels = donor.spec(var).unwrap().kind.levels().unwrap().len();
            cell_count = cell_count.saturating_mul(levels);
        }
        total = total.saturating_add(cell_count);
        if total > SUBSET_CAP {
            return Err(Error::InvalidArgument(format!(
                "subset enumeration exceeds {SUBSET_CAP} cells; use fewer subset variables"
            )));
        }
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let mut label = String::new();
            for var in &vars {
                let codes = donor.categorical(var)?;
                let levels = donor.spec(var).unwrap().kind.levels().unwrap();
                if !label.is_empty() {
                    label.push('&');
                }
                let _ = write!(label, "{var}={}", levels[codes[i] as usize]);
            }
            groups.entry(label).or_default().push(i);
        }
        out.extend(groups);
    }
    Ok(out)
}

fn compare_cells(
    donor: &Microdata,
    simulated: &ImplicateSet,
    var: &str,
    kind: &ColumnKind,
    subset: &str,
    rows: &[usize],
) -> Result<Vec<ValidationCell>> {
    let z90 = norm_quantile(0.95);
    let w: Vec<f64> = rows.iter().map(|&i| donor.weights()[i]).collect();
    let m_count = simulated.n_implicates();
    let mut cells = Vec::new();
    match kind {
        ColumnKind::Continuous | ColumnKind::Semicontinuous => {
            let observed_all = donor.numeric(var)?;
            let y_o: Vec<f64> = rows.iter().map(|&i| observed_all[i]).collect();
            let obs = weighted_mean_se(&y_o, &w);
            let pairs: Vec<(f64, f64)> = (0..m_count)
                .map(|m| {
                    let sim = simulated.numeric(m, var).expect("fused numeric");
                    let y_s: Vec<f64> = rows.iter().map(|&i| sim[i]).collect();
                    let e = weighted_mean_se(&y_s, &w);
                    (e.estimate, if e.se.is_nan() { 0.0 } else { e.se })
                })
                .collect();
            let pooled = pool_rubin(&pairs, 0.90, 0.0);
            cells.push(ValidationCell {
                fusion_variable: var.to_string(),
                label: String::new(),
                subset: subset.to_string(),
                n: rows.len(),
                observed: obs.estimate,
                simulated: pooled.point,
                observed_moe: z90 * if obs.se.is_nan() { 0.0 } else { obs.se },
                simulated_moe: pooled.moe,
            });
            if matches!(kind, ColumnKind::Semicontinuous) {
                let ind_o: Vec<f64> = y_o.iter().map(|&v| f64::from(v == 0.0)).collect();
                let obs0 = proportion_se(&ind_o, &w);
                let pairs0: Vec<(f64, f64)> = (0..m_count)
                    .map(|m| {
                        let sim = simulated.numeric(m, var).expect("fused numeric");
                        let ind: Vec<f64> =
                            rows.iter().map(|&i| f64::from(sim[i] == 0.0)).collect();
                        let e = proportion_se(&ind, &w);
                        (e.estimate, e.se)
                    })
                    .collect();
                let pooled0 = pool_rubin(&pairs0, 0.90, 0.0);
                cells.push(ValidationCell {
                    fusion_variable: var.to_string(),
                    label: "zero_share".to_string(),
                    subset: subset.to_string(),
                    n: rows.len(),
                    observed: obs0.estimate,
                    simulated: pooled0.point,
                    observed_moe: z90 * obs0.se,
                    simulated_moe: pooled0.moe,
                });
            }
        }
        ColumnKind::Categorical { levels } => {
            let observed_all = donor.categorical(var)?;
            for (l_ix, level) in levels.iter().enumerate() {
                let ind_o: Vec<f64> = rows
                    .iter()
                    .map(|&i| f64::from(observed_all[i] as usize == l_ix))
                    .collect();
                let obs = proportion_se(&ind_o, &w);
                let pairs: Vec<(f64, f64)> = (0..m_count)
                    .map(|m| {
                        let sim = simulated.categorical(m, var).expect("fused categorical");
                        let ind: Vec<f64> = rows
                            .iter()
                            .map(|&i| f64::from(sim[i] as usize == l_ix))
                            .collect();
                        let e = proportion_se(&ind, &w);
                        (e.estimate, e.se)
                    })
                    .collect();
                let pooled = pool_rubin(&pairs, 0.90, 0.0);
                cells.push(ValidationCell {
                    fusion_variable: var.to_string(),
                    label: level.clone(),
                    subset: subset.to_string(),
                    n: rows.len(),
                    observed: obs.estimate,
                    simulated: pooled.point,
                    observed_moe: z90 * obs.se,
                    simulated_moe: pooled.moe,
                });
            }
        }
    }
    Ok(cells)
}

/// Value added over the naive full-sample-mean predictor, clipped to [0, 1].
pub fn value_added(y_s: f64, y_o: f64, grand_mean: f64) -> f64 {
    let denom = (grand_mean - y_o).abs();
    if denom == 0.0 {
        return if y_s == y_o { 1.0 } else { 0.0 };
    }
    (1.0 - (y_s - y_o).abs() / denom).max(0.0)
}

/// Running median over a rank window of width max(5, frac * len), evaluated
/// at each distinct n, sorted ascending by n.
pub fn median_smooth(points: &[(f64, f64)], window_frac: f64) -> Vec<(f64, f64)> {
    assert!(points.len() >= 5, "median_smooth needs at least 5 points");
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let len = sorted.len();
    let width = ((window_frac * len as f64).round() as usize).max(5).min(len);
    let half = width / 2;
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < len {
        let n = sorted[i].0;
        let mut j = i;
        while j < len && sorted[j].0 == n {
            j += 1;
        }
        let center = (i + j - 1) / 2;
        let lo = center.saturating_sub(half);
        let hi = (center + half).min(len - 1);
        let mut window: Vec<f64> = sorted[lo..=hi].iter().map(|p| p.1).collect();
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = window.len() / 2;
        let med = if window.len() % 2 == 1 {
            window[mid]
        } else {
            0.5 * (window[mid - 1] + window[mid])
        };
        out.push((n, med));
        i = j;
    }
    out
}

/// Per-(variable, label) curves for every metric, with smoothing.
pub fn build_curves(cells: &[ValidationCell]) -> Vec<ValidationCurve> {
    // Grand mean per (variable, label) from the full-sample cell.
    let mut grand: BTreeMap<(String, String), f64> = BTreeMap::new();
    for c in cells {
        if c.subset.is_empty() {
            grand.insert((c.fusion_variable.clone(), c.label.clone()), c.observed);
        }
    }
    let mut by_series: BTreeMap<(String, String), Vec<&ValidationCell>> = BTreeMap::new();
    for c in cells {
        by_series
            .entry((c.fusion_variable.clone(), c.label.clone()))
            .or_default()
            .push(c);
    }
    let mut curves = Vec::new();
    for ((var, label), series) in by_series {
        let grand_mean = *grand.get(&(var.clone(), label.clone())).unwrap_or(&0.0);
        for metric in CurveMetric::all() {
            let total = series.len();
            let points: Vec<(f64, f64)> = series
                .iter()
                .filter_map(|c| {
                    let value = match metric {
                        CurveMetric::AbsPctError => {
                            if c.observed.abs() < PCT_ERROR_FLOOR {
                                return None;
                            }
                            (c.simulated - c.observed).abs() / c.observed.abs()
                        }
                        CurveMetric::ValueAdded => {
                            value_added(c.simulated, c.observed, grand_mean)
                        }
                        CurveMetric::MoeRatio => {
                            if c.observed_moe <= 0.0 {
                                return None;
                            }
                            c.simulated_moe / c.observed_moe
                        }
                    };
                    Some((c.n as f64, value))
                })
                .collect();
            if points.len() < 5 {
                continue;
            }
            let excluded = total - points.len();
            let smoothed = median_smooth(&points, SMOOTH_WINDOW_FRAC);
            curves.push(ValidationCurve {
                metric,
                variable: var.clone(),
                label: label.clone(),
                points,
                smoothed,
                excluded,
            });
        }
    }
    curves
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// Write per-metric CSV tables and SVG plots; returns the files written.
pub fn emit_report(
    cells: &[ValidationCell],
    curves: &[ValidationCurve],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if cells.is_empty() {
        return Err(Error::InvalidArgument("no validation cells to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let cells_path = out_dir.join("validation_cells.csv");
    let mut body =
        String::from("variable,label,subset,n,observed,simulated,observed_moe,simulated_moe\n");
    for c in cells {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{},{}",
            c.fusion_variable,
            c.label,
            c.subset,
            c.n,
            c.observed,
            c.simulated,
            c.observed_moe,
            c.simulated_moe
        );
    }
    fs::write(&cells_path, body).map_err(|e| Error::io(&cells_path, e))?;
    written.push(cells_path);

    for metric in CurveMetric::all() {
        let metric_curves: Vec<&ValidationCurve> =
            curves.iter().filter(|c| c.metric == metric).collect();
        let csv_path = out_dir.join(format!("validation_{}.csv", metric.file_stem()));
        let mut body = String::from("variable,label,n,value,smoothed,excluded_cells\n");
        for curve in &metric_curves {
            let smooth_at = |n: f64| -> f64 {
                curve
                    .smoothed
                    .iter()
                    .find(|(sn, _)| *sn == n)
                    .map(|&(_, v)| v)
                    .unwrap_or(f64::NAN)
            };
            for &(n, v) in &curve.points {
                let _ = writeln!(
                    body,
                    "{},{},{},{},{},{}",
                    curve.variable,
                    curve.label,
                    n,
                    v,
                    smooth_at(n),
                    curve.excluded
                );
            }
        }
        fs::write(&csv_path, body).map_err(|e| Error::io(&csv_path, e))?;
        written.push(csv_path);

        let svg_path = out_dir.join(format!("validation_{}.svg", metric.file_stem()));
        fs::write(&svg_path, render_svg(metric, &metric_curves))
            .map_err(|e| Error::io(&svg_path, e))?;
        written.push(svg_path);
    }
    Ok(written)
}

const PALETTE: [&str; 8] = [
    "#1b6ca8", "#d1495b", "#66a182", "#edae49", "#7a5195", "#8d6a9f", "#2e4057", "#c05746",
];

/// Rank-scaled scatter + smoothed polyline per series. The x axis positions
/// subset sizes by rank so small subsets get readable resolution.
fn render_svg(metric: CurveMetric, curves: &[&ValidationCurve]) -> String {
    let (w, h, ml, mr, mt, mb) = (860.0, 520.0, 70.0, 170.0, 30.0, 55.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    // Rank scale over all distinct n values.
    let mut ns: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .collect();
    ns.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ns.dedup();
    let x_of = |n: f64| -> f64 {
        if ns.len() < 2 {
            return ml + 0.5 * plot_w;
        }
        let rank = ns.partition_point(|&v| v < n) as f64;
        ml + plot_w * rank / (ns.len() - 1) as f64
    };
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in curves {
        for &(_, v) in &c.points {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    if !y_min.is_finite() || y_min == y_max {
        y_min = 0.0;
        y_max = 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let y_of = |v: f64| -> f64 { mt + plot_h * (1.0 - (v - y_min) / (y_max - y_min)) };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let title = match metric {
        CurveMetric::AbsPctError => "Absolute percent error vs subset size",
        CurveMetric::ValueAdded => "Value added vs subset size",
        CurveMetric::MoeRatio => "Simulated / observed MOE vs subset size",
    };
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="15">{title}</text>"#,
        ml
    );
    // Axes.
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        mt + plot_h
    );
    // X tick labels at rank quantiles (the axis is rank-scaled, not linear).
    for q in [0.0, 0.25, 0.5, 0.75, 1.0] {
        if ns.is_empty() {
            break;
        }
        let ix = ((ns.len() - 1) as f64 * q).round() as usize;
        let n = ns[ix];
        let x = x_of(n);
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#,
            mt + plot_h,
            mt + plot_h + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{n}</text>"#,
            mt + plot_h + 18.0
        );
    }
    for q in [0.0, 0.5, 1.0] {
        let v = y_min + q * (y_max - y_min);
        let y = y_of(v);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            ml - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">subset size (rank scale)</text>"#,
        ml + plot_w / 2.0,
        h - 12.0
    );

    for (ix, curve) in curves.iter().enumerate() {
        let color = PALETTE[ix % PALETTE.len()];
        for &(n, v) in &curve.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="2" fill="{color}" fill-opacity="0.35"/>"#,
                x_of(n),
                y_of(v)
            );
        }
        let path: Vec<String> = curve
            .smoothed
            .iter()
            .map(|&(n, v)| format!("{:.2},{:.2}", x_of(n), y_of(v)))
            .collect();
        if path.len() >= 2 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        let name = if curve.label.is_empty() {
            curve.variable.clone()
        } else {
            format!("{} [{}]", curve.variable, curve.label)
        };
        let ly = mt + 16.0 * ix as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#,
            ml + plot_w + 12.0,
            ly - 9.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11">{name}</text>"#,
            ml + plot_w + 26.0
        );
    }
    s.push_str("</svg>\n");
    s
}
