//! Evaluation metrics for counterfactual sets and classifier skill.

use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::forest::ForestModel;
use crate::genetic::CounterfactualSet;
use crate::series::FeatureLayout;

/// Default change threshold for sparsity, in normalized feature units.
pub const DEFAULT_SPARSITY_EPS: f64 = 1e-6;

/// Unconstrained dynamic time warping with absolute-difference local cost.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PgceError::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// DTW summed over channels, each channel's window sequence aligned separately.
pub fn dtw_by_channel(x: &[f64], x_cf: &[f64], layout: &FeatureLayout) -> Result<f64> {
    if x.len() != layout.dim() {
        return Err(PgceError::dims(layout.dim(), x.len()));
    }
    if x_cf.len() != layout.dim() {
        return Err(PgceError::dims(layout.dim(), x_cf.len()));
    }
    let w = layout.windows;
    (0..layout.channels())
        .map(|c| dtw(&x[c * w..(c + 1) * w], &x_cf[c * w..(c + 1) * w]))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    pub changed: usize,
    pub unchanged_fraction: f64,
}

/// Changed-feature count and unchanged fraction; a feature is changed when
/// `|x_i - x'_i| > eps`.
pub fn sparsity(x: &[f64], x_cf: &[f64], eps: f64) -> Result<Sparsity> {
    if x.len() != x_cf.len() {
        return Err(PgceError::dims(x.len(), x_cf.len()));
    }
    let changed = x.iter().zip(x_cf).filter(|(a, b)| (*a - *b).abs() > eps).count();
    let unchanged_fraction = if x.is_empty() {
        1.0
    } else {
        1.0 - changed as f64 / x.len() as f64
    };
    Ok(Sparsity {
        changed,
        unchanged_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityNorm {
    #[default]
    L1,
    L2,
}

/// Mean pairwise distance over unordered candidate pairs; 0 for fewer than two.
pub fn diversity_mean(candidates: &[Vec<f64>], norm: DiversityNorm) -> Result<f64> {
    let n = candidates.len();
    if n < 2 {
        return Ok(0.0);
    }
    let d = candidates[0].len();
    if let Some(bad) = candidates.iter().find(|c| c.len() != d) {
        return Err(PgceError::dims(d, bad.len()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += distance(&candidates[i], &candidates[j], norm);
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

pub(crate) fn distance(a: &[f64], b: &[f64], norm: DiversityNorm) -> f64 {
    match norm {
        DiversityNorm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        DiversityNorm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// Contingency cells with SEP (class 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(truth: &[u8], predicted: &[u8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, _) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Skill scores; `None` marks a score whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillScores {
    pub accuracy: Option<f64>,
    pub tss: Option<f64>,
    pub hss: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn skill_scores(c: &ConfusionCounts) -> SkillScores {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let accuracy = ratio(tp + tn, c.total() as f64);
    let tss = match (ratio(tp, tp + fn_), ratio(fp, fp + tn)) {
        (Some(pod), Some(pofd)) => Some(pod - pofd),
        _ => None,
    };
    let hss = ratio(
        2.0 * (tp * tn - fp * fn_),
        (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn),
    );
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    SkillScores { accuracy, tss, hss, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u8,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub candidates: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
}

/// Re-classifies every candidate and compares against its set's target class.
pub fn fidelity<'a, I>(sets: I, model: &ForestModel) -> Result<FidelityReport>
where
    I: IntoIterator<Item = &'a CounterfactualSet>,
{
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for set in sets {
        for cand in &set.candidates {
            truth.push(set.target_class);
            predicted.push(model.predict(&cand.values)?);
        }
    }
    if truth.is_empty() {
        return Err(PgceError::EmptySet);
    }
    let hits = truth.iter().zip(&predicted).filter(|(t, p)| t == p).count();
    let per_class = (0u8..2)
        .map(|class| {
            let tp = truth
                .iter()
                .zip(&predicted)
                .filter(|(t, p)| **t == class && **p == class)
                .count();
            let support = truth.iter().filter(|t| **t == class).count();
            let predicted_n = predicted.iter().filter(|p| **p == class).count();
            let precision = ratio(tp as f64, predicted_n as f64);
            let recall = ratio(tp as f64, support as f64);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassReport {
                class,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    Ok(FidelityReport {
        candidates: truth.len(),
        accuracy: hits as f64 / truth.len() as f64,
        per_class,
    })
}

/// Per-instance metrics for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub instance: usize,
    pub dtw: f64,
    pub sparsity_fraction: f64,
    pub changed_features: f64,
    pub diversity: f64,
    pub ordering_violations: f64,
    pub range_violations: f64,
    pub valid_fraction: f64,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> MeanStd {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub instances: usize,
    pub dtw: MeanStd,
    pub sparsity: MeanStd,
    pub diversity: MeanStd,
    pub runtime_seconds: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarAxis {
    pub metric: String,
    pub higher_is_better: bool,
    /// One value per method, in the order of [`MetricsReport::methods`].
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: Vec<MethodSummary>,
    pub radar: Vec<RadarAxis>,
}

fn summarize(method: &str, rows: &[InstanceMetrics]) -> MethodSummary {
    MethodSummary {
        method: method.to_owned(),
        instances: rows.len(),
        dtw: MeanStd::of(rows.iter().map(|r| r.dtw)),
        sparsity: MeanStd::of(rows.iter().map(|r| r.sparsity_fraction)),
        diversity: MeanStd::of(rows.iter().map(|r| r.diversity)),
        runtime_seconds: MeanStd::of(rows.iter().map(|r| r.runtime_seconds)),
    }
}

/// Mean and std per metric per method, plus per-axis min-max normalized means.
/// An axis where both methods agree normalizes to 1.0 for both.
pub fn benchmark_compare(
    method_a: (&str, &[InstanceMetrics]),
    method_b: (&str, &[InstanceMetrics]),
) -> Result<MetricsReport> {
    let ids = |rows: &[InstanceMetrics]| rows.iter().map(|r| r.instance).collect::<Vec<_>>();
    if ids(method_a.1) != ids(method_b.1) {
        return Err(PgceError::MismatchedInstanceSets(format!(
            "{} has {} instances, {} has {}",
            method_a.0,
            method_a.1.len(),
            method_b.0,
            method_b.1.len()
        )));
    }
    let methods = vec![summarize(method_a.0, method_a.1), summarize(method_b.0, method_b.1)];
    type Axis = (&'static str, bool, fn(&MethodSummary) -> f64);
    let axes: [Axis; 3] = [
        ("proximity_dtw", false, |m| m.dtw.mean),
        ("sparsity", true, |m| m.sparsity.mean),
        ("diversity", true, |m| m.diversity.mean),
    ];
    let radar = axes
        .iter()
        .map(|(name, higher, get)| {
            let vals: Vec<f64> = methods.iter().map(get).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let normalized = vals
                .iter()
                .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
                .collect();
            RadarAxis {
                metric: (*name).to_owned(),
                higher_is_better: *higher,
                normalized,
            }
        })
        .collect();
    Ok(MetricsReport { methods, radar })
}
