//! Linear probing of frozen representations.
//!
//! One least-squares regression `v = β₀ + β·z` per state variable, fitted on
//! the rows where that variable is valid, scored by the coefficient of
//! determination on the same rows. Features are centred and scaled to unit
//! variance before solving the (lightly damped) normal equations by
//! Cholesky; coefficients are mapped back to the raw feature scale.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::NormMode;
use crate::dataset::{load_frames, Manifest};
use crate::encoder::{Encoder, Representation};
use crate::error::ProbeError;

/// Dense row-major `rows × cols` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ProbeError> {
        if data.len() != rows * cols {
            return Err(ProbeError::Mismatch(format!("{rows}x{cols} features need {} values, got {}", rows * cols, data.len())));
        }
        Ok(Features { rows, cols, data })
    }

    pub fn from_representations(reps: &[Representation]) -> Result<Self, ProbeError> {
        let cols = reps.first().map_or(0, Representation::dim);
        if reps.iter().any(|r| r.dim() != cols) {
            return Err(ProbeError::Mismatch("representations differ in length".into()));
        }
        let data = reps.iter().flat_map(|r| r.0.iter().map(|&v| v as f64)).collect();
        Ok(Features { rows: reps.len(), cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Features {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Features { rows: idx.len(), cols: self.cols, data }
    }
}

/// Tikhonov damping on the standardised normal equations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Damping {
    /// `λ = c · mean(diag(XᵀX))`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative(1e-8)
    }
}

/// `β₀` first, then one coefficient per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub coefficients: Vec<f64>,
    pub variable_index: usize,
}

impl LinearProbe {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(z).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Minimises `Σ(vᵢ − β₀ − β·zᵢ)² + λ‖β̃‖²` where `β̃` are the coefficients of
/// the standardised features. Zero-variance columns get a zero coefficient.
pub fn fit_ols(z: &Features, v: &[f64], damping: Damping) -> Result<LinearProbe, ProbeError> {
    let (n, d) = (z.rows, z.cols);
    if n == 0 {
        return Err(ProbeError::Empty);
    }
    if v.len() != n {
        return Err(ProbeError::Mismatch(format!("{n} feature rows but {} targets", v.len())));
    }
    if n < d + 1 {
        log::warn!("fitting {d} features on only {n} rows; the probe is underdetermined");
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| z.data[i * d + j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| ((0..n).map(|i| (z.data[i * d + j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let active: Vec<usize> = (0..d).filter(|&j| scale[j] > 1e-12 * (1.0 + mean[j].abs())).collect();
    let v_mean = v.iter().sum::<f64>() / n as f64;
    let mut coefficients = vec![0.0; d + 1];
    if !active.is_empty() {
        let x = DMatrix::from_fn(n, active.len(), |i, a| {
            let j = active[a];
            (z.data[i * d + j] - mean[j]) / scale[j]
        });
        let y = DVector::from_iterator(n, v.iter().map(|t| t - v_mean));
        let mut gram = x.tr_mul(&x);
        let lambda = match damping {
            Damping::Relative(c) => c * gram.diagonal().mean(),
            Damping::Absolute(l) => l,
        };
        for a in 0..active.len() {
            gram[(a, a)] += lambda;
        }
        let rhs = x.tr_mul(&y);
        let chol = gram.cholesky().ok_or(ProbeError::Singular)?;
        let b = chol.solve(&rhs);
        if b.iter().any(|c| !c.is_finite()) {
            return Err(ProbeError::Singular);
        }
        for (a, &j) in active.iter().enumerate() {
            coefficients[j + 1] = b[a] / scale[j];
        }
    }
    coefficients[0] = v_mean - (0..d).map(|j| coefficients[j + 1] * mean[j]).sum::<f64>();
    Ok(LinearProbe { coefficients, variable_index: 0 })
}

/// `1 − SS_res / SS_tot`; NaN for fewer than two rows or a constant target.
pub fn r_squared(probe: &LinearProbe, z: &Features, v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 || z.rows != n {
        return f64::NAN;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = v.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return f64::NAN;
    }
    let ss_res: f64 = (0..n).map(|i| (v[i] - probe.predict(z.row(i))).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Percentage change of `method` over `base`; NaN unless `base > 0`.
pub fn improvement(r2_base: f64, r2_method: f64) -> f64 {
    if r2_base > 0.0 && r2_method.is_finite() {
        100.0 * (r2_method - r2_base) / r2_base
    } else {
        f64::NAN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableStatus {
    Ok,
    TooFewRows,
    ConstantTarget,
    Singular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

/// Min/avg/max over the finite entries; NaN when there are none.
pub fn summarize(values: &[f64]) -> Summary {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Summary { min: f64::NAN, avg: f64::NAN, max: f64::NAN };
    }
    Summary {
        min: finite.iter().copied().fold(f64::INFINITY, f64::min),
        avg: finite.iter().sum::<f64>() / finite.len() as f64,
        max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub damping: Damping,
    /// Fit on even valid rows and score on odd ones instead of in-sample.
    pub split_half: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { damping: Damping::default(), split_half: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariableResult {
    pub name: String,
    pub n_valid: usize,
    pub r2: f64,
    pub status: VariableStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub baseline_label: String,
    pub baseline_avg: f64,
    /// Per variable, NaN where undefined.
    pub per_variable: Vec<f64>,
    /// Improvement of the average R² over the baseline average.
    pub average: f64,
    /// Improvement of each group mean over the baseline's group of the same name.
    pub groups: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub label: String,
    pub dim: usize,
    pub n_rows: usize,
    pub variables: Vec<VariableResult>,
    pub groups: Vec<(String, f64)>,
    pub comparison: Option<Comparison>,
}

impl ProbeReport {
    pub fn r2(&self) -> Vec<f64> {
        self.variables.iter().map(|v| v.r2).collect()
    }

    pub fn summary(&self) -> Summary {
        summarize(&self.r2())
    }

    /// Adds per-variable and average improvements over `baseline`, matching
    /// variables by name.
    pub fn compare_to(&mut self, baseline: &ProbeReport) {
        let per_variable = self
            .variables
            .iter()
            .map(|v| {
                baseline.variables.iter().find(|b| b.name == v.name).map_or(f64::NAN, |b| improvement(b.r2, v.r2))
            })
            .collect();
        let groups = self
            .groups
            .iter()
            .map(|(name, r2)| {
                let base = baseline.groups.iter().find(|(n, _)| n == name).map_or(f64::NAN, |g| g.1);
                (name.clone(), improvement(base, *r2))
            })
            .collect();
        let base_avg = baseline.summary().avg;
        self.comparison = Some(Comparison {
            baseline_label: baseline.label.clone(),
            baseline_avg: base_avg,
            per_variable,
            average: improvement(base_avg, self.summary().avg),
            groups,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable_name,n_valid,r2\n");
        for v in &self.variables {
            let _ = writeln!(out, "{},{},{}", v.name, v.n_valid, fmt_num(v.r2));
        }
        out
    }

    pub fn to_json(&self) -> ReportJson {
        ReportJson {
            label: self.label.clone(),
            dim: self.dim,
            n_rows: self.n_rows,
            r2: SummaryJson::from(self.summary()),
            variables: self
                .variables
                .iter()
                .map(|v| VariableJson { name: v.name.clone(), n_valid: v.n_valid, r2: finite(v.r2), status: v.status })
                .collect(),
            groups: self.groups.iter().map(|(n, v)| GroupJson { name: n.clone(), r2: finite(*v) }).collect(),
            comparison: self.comparison.as_ref().map(|c| ComparisonJson {
                baseline_label: c.baseline_label.clone(),
                baseline_avg: finite(c.baseline_avg),
                avg_improvement_pct: finite(c.average),
                per_variable_improvement_pct: c.per_variable.iter().map(|&v| finite(v)).collect(),
                group_improvement_pct: c.groups.iter().map(|(n, v)| GroupImprovementJson { name: n.clone(), pct: finite(*v) }).collect(),
            }),
        }
    }

    /// Reads back the JSON form; absent values become NaN.
    pub fn from_json(j: &ReportJson) -> Self {
        ProbeReport {
            label: j.label.clone(),
            dim: j.dim,
            n_rows: j.n_rows,
            variables: j
                .variables
                .iter()
                .map(|v| VariableResult { name: v.name.clone(), n_valid: v.n_valid, r2: v.r2.unwrap_or(f64::NAN), status: v.status })
                .collect(),
            groups: j.groups.iter().map(|g| (g.name.clone(), g.r2.unwrap_or(f64::NAN))).collect(),
            comparison: None,
        }
    }

    /// `| label | min | avg | max |` with two decimals.
    pub fn table_row(&self) -> String {
        let s = self.summary();
        format!("| {:<10} | {:>5} | {:>5} | {:>5} |", self.label, fmt2(s.min), fmt2(s.avg), fmt2(s.max))
    }

    /// Writes `probe_per_variable.csv`, `probe_summary.json` and, when a
    /// comparison is present, `improvement.svg` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), ProbeError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ProbeError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join("probe_per_variable.csv");
        std::fs::write(&csv, self.to_csv()).map_err(io(&csv))?;
        let json = dir.join("probe_summary.json");
        let text = serde_json::to_string_pretty(&self.to_json()).expect("report serialises") + "\n";
        std::fs::write(&json, text).map_err(io(&json))?;
        if let Some(c) = &self.comparison {
            let mut bars = c.groups.clone();
            if bars.is_empty() {
                bars = self.variables.iter().zip(&c.per_variable).map(|(v, &p)| (v.name.clone(), p)).collect();
            }
            bars.insert(0, ("average".into(), c.average));
            let title = format!("{} vs {}: R² change (%)", self.label, c.baseline_label);
            let svg_path = dir.join("improvement.svg");
            std::fs::write(&svg_path, improvement_svg(&title, &bars)).map_err(io(&svg_path))?;
        }
        Ok(())
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NaN".into()
    }
}

fn fmt2(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "  -  ".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub min: Option<f64>,
    pub avg: Option<f64>,
    pub max: Option<f64>,
}

impl From<Summary> for SummaryJson {
    fn from(s: Summary) -> Self {
        SummaryJson { min: finite(s.min), avg: finite(s.avg), max: finite(s.max) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableJson {
    pub name: String,
    pub n_valid: usize,
    pub r2: Option<f64>,
    pub status: VariableStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupJson {
    pub name: String,
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonJson {
    pub baseline_label: String,
    pub baseline_avg: Option<f64>,
    /// `100 · (avg − baseline_avg) / baseline_avg`.
    pub avg_improvement_pct: Option<f64>,
    pub per_variable_improvement_pct: Vec<Option<f64>>,
    pub group_improvement_pct: Vec<GroupImprovementJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupImprovementJson {
    pub name: String,
    pub pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub label: String,
    pub dim: usize,
    pub n_rows: usize,
    pub r2: SummaryJson,
    pub variables: Vec<VariableJson>,
    pub groups: Vec<GroupJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonJson>,
}

/// Mean of the finite per-variable R² values of each named group.
pub fn group_average(report: &ProbeReport, groups: &[(String, Vec<usize>)]) -> Result<Vec<(String, f64)>, ProbeError> {
    let k = report.variables.len();
    let mut out = Vec::with_capacity(groups.len());
    for (name, idx) in groups {
        if idx.is_empty() {
            return Err(ProbeError::EmptyGroup(name.clone()));
        }
        for (pos, &i) in idx.iter().enumerate() {
            if i >= k {
                return Err(ProbeError::GroupIndex { name: name.clone(), index: i, k });
            }
            if idx[..pos].contains(&i) {
                return Err(ProbeError::DuplicateIndex { name: name.clone(), index: i });
            }
        }
        let vals: Vec<f64> = idx.iter().map(|&i| report.variables[i].r2).filter(|v| v.is_finite()).collect();
        let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        out.push((name.clone(), mean));
    }
    Ok(out)
}

/// Probes every manifest variable against precomputed features (row `i`
/// belongs to entry `i`).
pub fn probe_features(
    features: &Features,
    manifest: &Manifest,
    label: &str,
    options: &ProbeOptions,
) -> Result<ProbeReport, ProbeError> {
    if features.rows != manifest.len() {
        return Err(ProbeError::Mismatch(format!("{} feature rows for {} manifest entries", features.rows, manifest.len())));
    }
    let d = features.cols;
    let mut variables = Vec::with_capacity(manifest.k());
    let mut warned = false;
    for (j, name) in manifest.variable_names.iter().enumerate() {
        let idx = manifest.valid_indices(j)?;
        let (fit_idx, score_idx): (Vec<usize>, Vec<usize>) = if options.split_half {
            (idx.iter().step_by(2).copied().collect(), idx.iter().skip(1).step_by(2).copied().collect())
        } else {
            (idx.clone(), idx.clone())
        };
        let mut result = VariableResult { name: name.clone(), n_valid: idx.len(), r2: f64::NAN, status: VariableStatus::Ok };
        if fit_idx.len() < d + 1 || score_idx.len() < 2 {
            log::warn!("variable `{name}`: {} valid rows is too few for {d} features; reported as NaN", idx.len());
            result.status = VariableStatus::TooFewRows;
            variables.push(result);
            continue;
        }
        if fit_idx.len() < 4 * d && !warned {
            log::warn!("only {} rows for {d} features (< 4·d); in-sample R² will be inflated", fit_idx.len());
            warned = true;
        }
        let target = |rows: &[usize]| -> Vec<f64> { rows.iter().map(|&i| manifest.entries[i].state.values[j]).collect() };
        let (v_fit, v_score) = (target(&fit_idx), target(&score_idx));
        match fit_ols(&features.select_rows(&fit_idx), &v_fit, options.damping) {
            Ok(mut probe) => {
                probe.variable_index = j;
                result.r2 = r_squared(&probe, &features.select_rows(&score_idx), &v_score);
                if result.r2.is_nan() {
                    result.status = VariableStatus::ConstantTarget;
                }
            }
            Err(ProbeError::Singular) => {
                log::warn!("variable `{name}`: normal equations singular");
                result.status = VariableStatus::Singular;
            }
            Err(e) => return Err(e),
        }
        variables.push(result);
    }
    if variables.iter().all(|v| !v.r2.is_finite()) {
        return Err(ProbeError::NothingProbeable);
    }
    Ok(ProbeReport { label: label.into(), dim: d, n_rows: manifest.len(), variables, groups: Vec::new(), comparison: None })
}

/// Encodes every manifest frame once in eval mode, then probes.
pub fn probe_all(encoder: &Encoder, manifest: &Manifest, label: &str, options: &ProbeOptions) -> Result<ProbeReport, ProbeError> {
    let features = encode_manifest(encoder, manifest)?;
    probe_features(&features, manifest, label, options)
}

pub fn encode_manifest(encoder: &Encoder, manifest: &Manifest) -> Result<Features, ProbeError> {
    let cfg = encoder.config();
    let frames = load_frames(manifest, (cfg.input_height, cfg.input_width))?;
    let reps = encoder.encode(&frames, NormMode::Eval)?;
    Features::from_representations(&reps)
}

/// Horizontal-axis bar chart of percentage changes, positive bars up.
pub fn improvement_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (w, h, margin) = (80.0 + 60.0 * bars.len() as f64, 320.0, 50.0);
    let finite: Vec<f64> = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).collect();
    let extent = finite.iter().fold(10.0f64, |m, v| m.max(v.abs())) * 1.1;
    let zero_y = h / 2.0;
    let scale = (h / 2.0 - margin) / extent;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="40" y1="{zero_y}" x2="{}" y2="{zero_y}" stroke="black"/>"#, w - 20.0);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = 60.0 + 60.0 * i as f64;
        let label = xml_escape(label);
        if v.is_finite() {
            let bh = v.abs() * scale;
            let (y, color) = if *v >= 0.0 { (zero_y - bh, "#2b8cbe") } else { (zero_y, "#e34a33") };
            let _ = writeln!(s, r#"<rect x="{x}" y="{y:.2}" width="40" height="{bh:.2}" fill="{color}"/>"#);
            let ty = if *v >= 0.0 { y - 4.0 } else { y + bh + 12.0 };
            let _ = writeln!(s, r#"<text x="{}" y="{ty:.2}" text-anchor="middle">{v:.1}%</text>"#, x + 20.0);
        } else {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">n/a</text>"#, x + 20.0, zero_y - 4.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" transform="rotate(-45 {} {})">{label}</text>"#,
            x + 20.0,
            h - 8.0,
            x + 20.0,
            h - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
