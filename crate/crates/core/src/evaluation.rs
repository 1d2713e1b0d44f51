//! Fidelity metrics, hallucination-detection scoring and relative compute.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(invalid(format!("need at least {min} values, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value"));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn rmse(est: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(est, gt, 1)?;
    let mse = est.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / est.len() as f64;
    Ok(mse.sqrt())
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Lin's concordance correlation with population moments.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    if vx == 0.0 && vy == 0.0 {
        return Err(Error::UndefinedCorrelation("both variances are zero".into()));
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    Ok(2.0 * cov / (vx + vy + (mx - my).powi(2)))
}

/// `P(label = 1) = sigmoid(slope * score + intercept)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub slope: f64,
    pub intercept: f64,
    pub regularization: f64,
}

impl CalibrationModel {
    pub fn predict(&self, score: f64) -> f64 {
        sigmoid(self.slope * score + self.intercept)
    }

    pub fn predict_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.predict(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { max_iters: 200, grad_tol: 1e-8 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean negative log-likelihood plus `reg / 2 * slope²`.
pub fn logistic_objective(model: &CalibrationModel, scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len() as f64;
    let nll: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let z = model.slope * x + model.intercept;
            softplus(z) - f64::from(y) * z
        })
        .sum::<f64>()
        / n;
    nll + 0.5 * model.regularization * model.slope * model.slope
}

fn check_labels(labels: &[u8]) -> Result<(usize, usize)> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid(format!("label {bad} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Damped Newton iterations on the L2-penalized logistic likelihood (only
/// the slope is penalized).
pub fn fit_logistic(scores: &[f64], labels: &[u8], reg: f64, config: &LogisticConfig) -> Result<CalibrationModel> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(invalid("scores and labels must be nonempty and equally long"));
    }
    if !(reg.is_finite() && reg >= 0.0) {
        return Err(invalid(format!("regularization {reg} must be finite and nonnegative")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("non-finite score"));
    }
    let (pos, neg) = check_labels(labels)?;
    if pos == 0 || neg == 0 {
        return Err(invalid("logistic fit needs both classes"));
    }
    let n = scores.len() as f64;
    let base_rate = pos as f64 / n;
    let mut m = CalibrationModel { slope: 0.0, intercept: (base_rate / (1.0 - base_rate)).ln(), regularization: reg };
    let mut obj = logistic_objective(&m, scores, labels);
    for _ in 0..config.max_iters {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in scores.iter().zip(labels) {
            let p = m.predict(x);
            let r = p - f64::from(y);
            let w = p * (1.0 - p);
            gw += r * x;
            gb += r;
            hww += w * x * x;
            hwb += w * x;
            hbb += w;
        }
        gw = gw / n + reg * m.slope;
        gb /= n;
        hww = hww / n + reg;
        hwb /= n;
        hbb /= n;
        if gw.hypot(gb) <= config.grad_tol {
            return Ok(m);
        }
        let det = hww * hbb - hwb * hwb;
        let (dw, db) = if det > 1e-300 && det.is_finite() {
            ((hbb * gw - hwb * gb) / det, (hww * gb - hwb * gw) / det)
        } else {
            (gw, gb)
        };
        let mut step = 1.0;
        loop {
            let cand = CalibrationModel { slope: m.slope - step * dw, intercept: m.intercept - step * db, ..m };
            let c = logistic_objective(&cand, scores, labels);
            if c <= obj || step < 1e-12 {
                m = cand;
                obj = c;
                break;
            }
            step *= 0.5;
        }
    }
    Err(invalid(format!("logistic fit did not reach gradient norm {} in {} iterations", config.grad_tol, config.max_iters)))
}

/// Mann-Whitney AUROC; ties between a positive and a negative count 1/2.
pub fn auroc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(invalid("length mismatch"));
    }
    let (pos, neg) = check_labels(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedCorrelation("AUROC needs both classes".into()));
    }
    let ranks = average_ranks(probs);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Equal-width bins over `[0, 1]`; a probability of exactly 1 goes in the
/// last bin.
pub fn ece(probs: &[f64], labels: &[u8], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(invalid("n_bins must be positive"));
    }
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(invalid("probs and labels must be nonempty and equally long"));
    }
    check_labels(labels)?;
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("probability {p} outside [0, 1]")));
        }
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += f64::from(y);
    }
    let n = probs.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (acc[b] / c - conf[b] / c).abs()
        })
        .sum())
}

pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(invalid("probs and labels must be nonempty and equally long"));
    }
    check_labels(labels)?;
    Ok(probs.iter().zip(labels).map(|(p, &y)| (p - f64::from(y)).powi(2)).sum::<f64>() / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
    pub ece: f64,
    pub brier: f64,
}

pub fn detection_metrics(probs: &[f64], labels: &[u8], n_bins: usize) -> Result<DetectionMetrics> {
    let auroc = match auroc(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(DetectionMetrics { auroc, ece: ece(probs, labels, n_bins)?, brier: brier(probs, labels)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pass {
    /// Model size in arbitrary units (for example billions of parameters).
    pub size: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub label: String,
    pub passes: Vec<Pass>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    DraftsOnly,
    #[default]
    DraftsPlusTarget,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drafts-only" => Ok(Self::DraftsOnly),
            "drafts-plus-target" => Ok(Self::DraftsPlusTarget),
            other => Err(invalid(format!("unknown cost mode {other:?}"))),
        }
    }
}

impl CostEntry {
    pub fn new(label: impl Into<String>, passes: Vec<Pass>) -> Result<Self> {
        let e = Self { label: label.into(), passes };
        if e.passes.is_empty() {
            return Err(invalid("cost entry needs at least one pass"));
        }
        if e.passes.iter().any(|p| !(p.size.is_finite() && p.size > 0.0)) {
            return Err(invalid("model sizes must be positive"));
        }
        Ok(e)
    }

    pub fn total(&self) -> f64 {
        self.passes.iter().map(|p| p.size * p.count as f64).sum()
    }

    /// `members` forward passes of the full target.
    pub fn target_ensemble(target_size: f64, members: usize) -> Result<Self> {
        Self::new(format!("{members} x target"), vec![Pass { size: target_size, count: members }])
    }

    /// `drafts` draft passes, plus one target pass for the proxy when the
    /// mode counts it.
    pub fn draft_ensemble(draft_size: f64, drafts: usize, target_size: f64, mode: CostMode) -> Result<Self> {
        let mut passes = vec![Pass { size: draft_size, count: drafts }];
        if mode == CostMode::DraftsPlusTarget {
            passes.push(Pass { size: target_size, count: 1 });
        }
        Self::new(format!("{drafts} x draft ({mode:?})"), passes)
    }
}

pub fn relative_flops(method: &CostEntry, baseline: &CostEntry) -> Result<f64> {
    let b = baseline.total();
    if b.is_nan() || b <= 0.0 {
        return Err(invalid("baseline cost must be positive"));
    }
    Ok(method.total() / b)
}

/// Rounds half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let m = mean(values);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean: m, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: usize,
    pub seed: u64,
    pub rmse: f64,
    pub spearman: Option<f64>,
    pub ccc: Option<f64>,
    pub auroc: Option<f64>,
    pub ece: f64,
    pub brier: f64,
    pub rel_flops: f64,
    /// Mean draft JSD over the evaluation positions.
    pub mean_variance_proxy: f64,
    pub mean_bias_proxy: f64,
    pub mean_ground_truth: f64,
    pub token_pairs: usize,
    pub flagged_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run_id: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rmse: Option<MeanStd>,
    pub spearman: Option<MeanStd>,
    pub ccc: Option<MeanStd>,
    pub auroc: Option<MeanStd>,
    pub ece: Option<MeanStd>,
    pub brier: Option<MeanStd>,
}

impl Summary {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        let col = |f: &dyn Fn(&RunMetrics) -> Option<f64>| MeanStd::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            rmse: col(&|r| Some(r.rmse)),
            spearman: col(&|r| r.spearman),
            ccc: col(&|r| r.ccc),
            auroc: col(&|r| r.auroc),
            ece: col(&|r| Some(r.ece)),
            brier: col(&|r| Some(r.brier)),
        }
    }
}

/// Settings that shaped the numbers, stored alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub strategy: String,
    pub ensemble: String,
    pub proxy: String,
    pub aggregation: String,
    /// Which EU pairs feed the fidelity metrics.
    pub fidelity_population: String,
    pub ece_bins: usize,
    pub cost_mode: CostMode,
    /// What differs between runs.
    pub run_variation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_fingerprint: String,
    pub settings: ReportSettings,
    pub per_run: Vec<RunMetrics>,
    pub failed_runs: Vec<FailedRun>,
    pub summary: Summary,
    pub cost: CostEntry,
    pub cost_baseline: CostEntry,
    pub rel_flops: f64,
}

pub const TABLE_COLUMNS: [&str; 8] = ["run_id", "rmse", "spearman", "ccc", "auroc", "ece", "brier", "rel_flops"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    /// Header plus one comma-separated row per successful run.
    pub fn to_table(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_COLUMNS)?;
        for r in &self.per_run {
            w.write_record([
                r.run_id.to_string(),
                r.rmse.to_string(),
                cell(r.spearman),
                cell(r.ccc),
                cell(r.auroc),
                r.ece.to_string(),
                r.brier.to_string(),
                format!("{:.2}", r.rel_flops),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_document(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// RMSE against Spearman, one circle per run.
    pub fn to_scatter_svg(&self) -> String {
        let (w, h, pad) = (480.0, 360.0, 56.0);
        let pts: Vec<(usize, f64, f64)> =
            self.per_run.iter().map(|r| (r.run_id, r.rmse, r.spearman.unwrap_or(0.0))).collect();
        let (xmin, xmax) = bounds(pts.iter().map(|p| p.1));
        let (ymin, ymax) = bounds(pts.iter().map(|p| p.2));
        let sx = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - ymin) / (ymax - ymin) * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
            y0 = h - pad,
            x1 = w - pad
        );
        let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y0}" stroke="black"/>"#, y0 = h - pad);
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="middle">RMSE</text>"#, x = w / 2.0, y = h - 16.0);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">Spearman</text>"#,
            y = h / 2.0
        );
        for (label, v, x, y) in [("min", xmin, sx(xmin), h - pad + 18.0), ("max", xmax, sx(xmax), h - pad + 18.0)] {
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}" font-size="10" text-anchor="middle" class="{label}">{v:.4}</text>"#);
        }
        for (v, y) in [(ymin, sy(ymin)), (ymax, sy(ymax))] {
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}" font-size="10" text-anchor="end">{v:.4}</text>"#, x = pad - 4.0);
        }
        for (id, x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>run {id}</title></circle>"#, sx(*x), sy(*y));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(rmse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_scales_with_affine_maps() {
        let mut r = rng::stream(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
            let (a, c) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let tx: Vec<f64> = x.iter().map(|v| a * v + c).collect();
            let ty: Vec<f64> = y.iter().map(|v| a * v + c).collect();
            assert!((rmse(&tx, &ty).unwrap() - a.abs() * rmse(&x, &y).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 5.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_abs_diff_eq!(spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 3f64.sqrt() / 2.0, epsilon = 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn spearman_ignores_monotone_transforms() {
        let mut r = rng::stream(2);
        let x: Vec<f64> = (0..50).map(|_| r.random_range(0.1..5.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| r.random_range(0.1..5.0)).collect();
        let tx: Vec<f64> = x.iter().map(|v| v.ln() * 3.0 + 1.0).collect();
        let ty: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        assert_eq!(spearman(&x, &y).unwrap(), spearman(&tx, &ty).unwrap());
    }

    #[test]
    fn ccc_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert_abs_diff_eq!(ccc(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let c = 1.3;
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        let m = x.iter().sum::<f64>() / 4.0;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(ccc(&x, &y).unwrap(), 2.0 * var / (2.0 * var + c * c), epsilon = 1e-12);
        let s = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(ccc(&s, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(ccc(&[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn separable_scores_rank_perfectly() {
        let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let labels = [0, 0, 0, 1, 1, 1];
        let m = fit_logistic(&scores, &labels, 1e-3, &LogisticConfig::default()).unwrap();
        assert!(m.slope.is_finite() && m.intercept.is_finite());
        assert_eq!(auroc(&m.predict_all(&scores), &labels).unwrap(), 1.0);
        assert_eq!(m, fit_logistic(&scores, &labels, 1e-3, &LogisticConfig::default()).unwrap());
    }

    #[test]
    fn single_class_fit_is_rejected() {
        assert!(fit_logistic(&[0.1, 0.2], &[1, 1], 0.1, &LogisticConfig::default()).is_err());
    }

    #[test]
    fn uninformative_scores_fit_flat() {
        // every score value appears once with each label
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..50 {
            let s = i as f64 / 49.0;
            scores.extend([s, s]);
            labels.extend([0u8, 1]);
        }
        let m = fit_logistic(&scores, &labels, 1e-2, &LogisticConfig::default()).unwrap();
        // grid-search oracle on the same objective
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in -200..=200 {
            for j in -200..=200 {
                let cand = CalibrationModel { slope: i as f64 * 0.01, intercept: j as f64 * 0.01, regularization: 1e-2 };
                let o = logistic_objective(&cand, &scores, &labels);
                if o < best.0 {
                    best = (o, cand.slope, cand.intercept);
                }
            }
        }
        assert!((m.slope - best.1).abs() <= 0.01 && (m.intercept - best.2).abs() <= 0.01);
        assert!(m.slope.abs() < 0.01);
        assert!(m.predict_all(&scores).iter().all(|p| (p - 0.5).abs() <= 0.01));
    }

    #[test]
    fn fitted_brier_beats_constant() {
        let mut r = rng::stream(3);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..80).map(|_| r.random_range(0.0..1.0)).collect();
            let labels: Vec<u8> = scores.iter().map(|s| u8::from(r.random::<f64>() < *s)).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            let m = fit_logistic(&scores, &labels, 1e-6, &LogisticConfig::default()).unwrap();
            let base = labels.iter().map(|&l| f64::from(l)).sum::<f64>() / 80.0;
            let fitted = brier(&m.predict_all(&scores), &labels).unwrap();
            assert!(fitted <= brier(&vec![base; 80], &labels).unwrap() + 1e-9);
        }
    }

    #[test]
    fn detection_examples() {
        let labels = [0, 0, 1, 1];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
        let d = detection_metrics(&[0.5; 4], &labels, 10).unwrap();
        assert_eq!(d.brier, 0.25);
        assert_eq!(d.ece, 0.0);
        let one = detection_metrics(&[0.3, 0.6], &[1, 1], 10).unwrap();
        assert!(one.auroc.is_none());
        assert!(matches!(auroc(&[0.3, 0.6], &[1, 1]), Err(Error::UndefinedCorrelation(_))));
        assert_abs_diff_eq!(ece(&[1.0, 0.0], &[1, 0], 10).unwrap(), 0.0);
    }

    #[test]
    fn auroc_ignores_monotone_transforms() {
        let mut r = rng::stream(4);
        let p: Vec<f64> = (0..60).map(|_| r.random_range(0.01..0.99)).collect();
        let l: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let t: Vec<f64> = p.iter().map(|v| v * v * v).collect();
        assert_eq!(auroc(&p, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn cost_ratios() {
        let base = CostEntry::target_ensemble(8.0, 3).unwrap();
        assert_eq!(round2(relative_flops(&base, &base).unwrap()), 1.00);
        let small = CostEntry::draft_ensemble(1.0, 6, 8.0, CostMode::DraftsPlusTarget).unwrap();
        assert_eq!(small.total(), 14.0);
        assert_eq!(round2(relative_flops(&small, &base).unwrap()), 0.58);
        let mid = CostEntry::draft_ensemble(3.0, 6, 8.0, CostMode::DraftsPlusTarget).unwrap();
        assert_eq!(round2(relative_flops(&mid, &base).unwrap()), 1.08);
        let mid_only = CostEntry::draft_ensemble(3.0, 6, 8.0, CostMode::DraftsOnly).unwrap();
        assert_eq!(round2(relative_flops(&mid_only, &base).unwrap()), 0.75);
        assert!(CostEntry::new("empty", vec![]).is_err());
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!(MeanStd::of(&[]).is_none());
    }
}
