//! Physics constraints on window features: channel ordering within a window,
//! empirical per-feature ranges, and bounded jumps between adjacent windows.
//!
//! Penalties default to violation counts. [`PenaltyMode::Magnitude`] sums the
//! overshoot distances instead, measured in the spec's normalized units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::series::{FeatureLayout, FeatureVector};

pub const SPEC_FORMAT: &str = "pgce-physics-spec";
pub const SPEC_VERSION: u32 = 1;

/// Default multiplier applied to the empirical max adjacent-window jump.
pub const DEFAULT_SMOOTHNESS_FACTOR: f64 = 1.5;
/// Default rolling-mean width used after generation.
pub const DEFAULT_SMOOTHING_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    #[default]
    Count,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Separate bounds for every channel/window feature.
    #[default]
    PerFeature,
    /// One bound per channel shared by all its windows.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Ordering groups, range bounds and smoothness tolerances over one feature
/// layout, plus the per-feature min-max scaling used for normalized distances.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsSpec {
    layout: FeatureLayout,
    ordering_groups: Vec<Vec<usize>>,
    range_bounds: Vec<Bounds>,
    smoothness_tolerances: Vec<f64>,
    scaling: Vec<Bounds>,
    penalty_mode: PenaltyMode,
}

impl PhysicsSpec {
    pub fn new(
        layout: FeatureLayout,
        ordering_groups: Vec<Vec<usize>>,
        range_bounds: Vec<Bounds>,
        smoothness_tolerances: Vec<f64>,
        scaling: Vec<Bounds>,
    ) -> Result<Self> {
        let d = layout.dim();
        if range_bounds.len() != d {
            return Err(PgceError::dims(d, range_bounds.len()));
        }
        if scaling.len() != d {
            return Err(PgceError::dims(d, scaling.len()));
        }
        if smoothness_tolerances.len() != layout.channels() {
            return Err(PgceError::dims(layout.channels(), smoothness_tolerances.len()));
        }
        for (i, b) in range_bounds.iter().chain(&scaling).enumerate() {
            if b.min.is_nan() || b.max.is_nan() || b.min > b.max {
                return Err(PgceError::InvalidSpec(format!(
                    "bound {} has min {} > max {}",
                    i % d,
                    b.min,
                    b.max
                )));
            }
        }
        if let Some(bad) = smoothness_tolerances.iter().find(|t| t.is_nan() || **t <= 0.0) {
            return Err(PgceError::InvalidSpec(format!(
                "smoothness tolerance {bad} is not positive"
            )));
        }
        let mut seen = vec![false; d];
        for group in &ordering_groups {
            for &i in group {
                if i >= d {
                    return Err(PgceError::InvalidSpec(format!("ordering index {i} >= {d}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(PgceError::InvalidSpec(format!(
                        "feature {i} appears in more than one ordering group"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(PgceError::InvalidSpec(
                "every feature must belong to exactly one ordering group".into(),
            ));
        }
        Ok(PhysicsSpec {
            layout,
            ordering_groups,
            range_bounds,
            smoothness_tolerances,
            scaling,
            penalty_mode: PenaltyMode::Count,
        })
    }

    pub fn with_penalty_mode(mut self, mode: PenaltyMode) -> Self {
        self.penalty_mode = mode;
        self
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn ordering_groups(&self) -> &[Vec<usize>] {
        &self.ordering_groups
    }

    pub fn range_bounds(&self) -> &[Bounds] {
        &self.range_bounds
    }

    pub fn smoothness_tolerances(&self) -> &[f64] {
        &self.smoothness_tolerances
    }

    pub fn scaling(&self) -> &[Bounds] {
        &self.scaling
    }

    pub fn penalty_mode(&self) -> PenaltyMode {
        self.penalty_mode
    }

    /// Width used to normalize feature `i`; 1.0 when the training range is degenerate.
    pub fn scale_span(&self, i: usize) -> f64 {
        let span = self.scaling[i].span();
        if span > 0.0 {
            span
        } else {
            1.0
        }
    }

    pub fn normalize(&self, i: usize, v: f64) -> f64 {
        (v - self.scaling[i].min) / self.scale_span(i)
    }

    pub fn normalize_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().enumerate().map(|(i, &v)| self.normalize(i, v)).collect()
    }

    fn check_dim(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(PgceError::dims(self.dim(), values.len()));
        }
        Ok(())
    }

    /// Adjacent-pair ordering violations summed over all windows.
    pub fn ordering_violations(&self, values: &[f64]) -> Result<usize> {
        self.check_dim(values)?;
        Ok(self
            .ordering_groups
            .iter()
            .flat_map(|g| g.windows(2))
            .filter(|p| values[p[0]] < values[p[1]])
            .count())
    }

    /// Features strictly outside their inclusive bounds.
    pub fn range_violations(&self, values: &[f64]) -> Result<usize> {
        self.check_dim(values)?;
        Ok(values
            .iter()
            .zip(&self.range_bounds)
            .filter(|(v, b)| !b.contains(**v))
            .count())
    }

    /// Adjacent-window pairs whose jump exceeds the channel tolerance.
    pub fn smoothness_violations(&self, values: &[f64]) -> Result<usize> {
        self.check_dim(values)?;
        let w = self.layout.windows;
        let mut count = 0;
        for (c, tol) in self.smoothness_tolerances.iter().enumerate() {
            let row = &values[c * w..(c + 1) * w];
            count += row.windows(2).filter(|p| (p[1] - p[0]).abs() > *tol).count();
        }
        Ok(count)
    }

    /// Ordering penalty score under the configured mode.
    pub fn ordering_score(&self, values: &[f64]) -> Result<f64> {
        match self.penalty_mode {
            PenaltyMode::Count => self.ordering_violations(values).map(|c| c as f64),
            PenaltyMode::Magnitude => {
                self.check_dim(values)?;
                Ok(self
                    .ordering_groups
                    .iter()
                    .flat_map(|g| g.windows(2))
                    .map(|p| (values[p[1]] - values[p[0]]).max(0.0) / self.scale_span(p[1]))
                    .sum())
            }
        }
    }

    /// Range penalty score under the configured mode.
    pub fn range_score(&self, values: &[f64]) -> Result<f64> {
        match self.penalty_mode {
            PenaltyMode::Count => self.range_violations(values).map(|c| c as f64),
            PenaltyMode::Magnitude => {
                self.check_dim(values)?;
                Ok(values
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let b = self.range_bounds[i];
                        ((b.min - v).max(0.0) + (v - b.max).max(0.0)) / self.scale_span(i)
                    })
                    .sum())
            }
        }
    }

    /// Temporal-consistency penalty score under the configured mode.
    pub fn smoothness_score(&self, values: &[f64]) -> Result<f64> {
        match self.penalty_mode {
            PenaltyMode::Count => self.smoothness_violations(values).map(|c| c as f64),
            PenaltyMode::Magnitude => {
                self.check_dim(values)?;
                let w = self.layout.windows;
                let mut total = 0.0;
                for (c, tol) in self.smoothness_tolerances.iter().enumerate() {
                    for j in 0..w.saturating_sub(1) {
                        let (a, b) = (c * w + j, c * w + j + 1);
                        total += ((values[b] - values[a]).abs() - tol).max(0.0) / self.scale_span(b);
                    }
                }
                Ok(total)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&SpecFile::from(self))?;
        std::fs::write(path, text).map_err(|e| PgceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgceError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&SpecFile::from(self))?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SpecFile = toml::from_str(text)?;
        file.into_spec()
    }
}

pub fn ordering_penalty(x: &FeatureVector, spec: &PhysicsSpec) -> Result<usize> {
    spec.ordering_violations(&x.values)
}

pub fn range_penalty(x: &FeatureVector, spec: &PhysicsSpec) -> Result<usize> {
    spec.range_violations(&x.values)
}

pub fn smoothness_violations(x: &FeatureVector, spec: &PhysicsSpec) -> Result<usize> {
    spec.smoothness_violations(&x.values)
}

/// Centered rolling mean applied to each channel's window sequence separately.
/// Windows are truncated at channel edges; `window == 1` is the identity.
pub fn rolling_mean_smooth(values: &[f64], layout: &FeatureLayout, window: usize) -> Result<Vec<f64>> {
    if values.len() != layout.dim() {
        return Err(PgceError::dims(layout.dim(), values.len()));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(PgceError::InvalidConfig(format!(
            "smoothing window must be odd and positive, got {window}"
        )));
    }
    let half = window / 2;
    let w = layout.windows;
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(w.max(1)) {
        for j in 0..row.len() {
            let lo = j.saturating_sub(half);
            let hi = (j + half + 1).min(row.len());
            let slice = &row[lo..hi];
            // Bit-exact identity for constant neighborhoods.
            if slice.iter().all(|v| *v == slice[0]) {
                out.push(slice[0]);
            } else {
                out.push(slice.iter().sum::<f64>() / slice.len() as f64);
            }
        }
    }
    Ok(out)
}

/// [`rolling_mean_smooth`] over a feature vector whose names follow `layout`.
pub fn smooth_vector(x: &FeatureVector, layout: &FeatureLayout, window: usize) -> Result<FeatureVector> {
    Ok(x.with_values(rolling_mean_smooth(&x.values, layout, window)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Fraction trimmed from each tail; 0 uses the empirical min and max.
    pub quantile_margin: f64,
    pub smoothness_factor: f64,
    pub bound_mode: BoundMode,
    /// Relative widening of each bound: `min - p|min|`, `max + p|max|`.
    #[serde(default)]
    pub range_padding: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            quantile_margin: 0.0,
            smoothness_factor: DEFAULT_SMOOTHNESS_FACTOR,
            bound_mode: BoundMode::PerFeature,
            range_padding: 0.0,
        }
    }
}

/// Linear-interpolation percentile on a sorted sample, `q` in [0, 1].
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Fits bounds, ordering groups and tolerances from historical feature vectors.
///
/// Ordering groups follow the channel order of `layout` within each window.
/// After fitting, bounds are widened along each ordering group so that the
/// lower and upper envelopes are themselves ordered; this keeps the repair
/// pass feasible and never excludes a training value.
pub fn fit_spec(training: &[FeatureVector], layout: &FeatureLayout, options: FitOptions) -> Result<PhysicsSpec> {
    if training.is_empty() {
        return Err(PgceError::EmptyTrainingSet);
    }
    let d = layout.dim();
    if let Some(bad) = training.iter().find(|x| x.dim() != d) {
        return Err(PgceError::dims(d, bad.dim()));
    }
    let q = options.quantile_margin;
    if !(0.0..0.5).contains(&q) {
        return Err(PgceError::InvalidSpec(format!("quantile margin {q} outside [0, 0.5)")));
    }
    let w = layout.windows;
    let column = |idx: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
        let mut col: Vec<f64> = idx.flat_map(|i| training.iter().map(move |x| x.values[i])).collect();
        col.sort_by(f64::total_cmp);
        col
    };

    let mut scaling = Vec::with_capacity(d);
    for i in 0..d {
        let col = column(&mut std::iter::once(i));
        scaling.push(Bounds {
            min: col[0],
            max: col[col.len() - 1],
        });
    }

    let mut bounds = vec![Bounds { min: 0.0, max: 0.0 }; d];
    match options.bound_mode {
        BoundMode::PerFeature => {
            for (i, b) in bounds.iter_mut().enumerate() {
                let col = column(&mut std::iter::once(i));
                *b = Bounds {
                    min: quantile_sorted(&col, q),
                    max: quantile_sorted(&col, 1.0 - q),
                };
            }
        }
        BoundMode::PerChannel => {
            for c in 0..layout.channels() {
                let col = column(&mut (c * w..(c + 1) * w));
                let b = Bounds {
                    min: quantile_sorted(&col, q),
                    max: quantile_sorted(&col, 1.0 - q),
                };
                bounds[c * w..(c + 1) * w].fill(b);
            }
        }
    }

    let pad = options.range_padding;
    if !(pad >= 0.0 && pad.is_finite()) {
        return Err(PgceError::InvalidSpec(format!(
            "range padding {pad} must be finite and >= 0"
        )));
    }
    for b in &mut bounds {
        b.min -= pad * b.min.abs();
        b.max += pad * b.max.abs();
    }

    let ordering_groups: Vec<Vec<usize>> = (0..w)
        .map(|j| (0..layout.channels()).map(|c| layout.index(c, j)).collect())
        .collect();
    for group in &ordering_groups {
        for p in 1..group.len() {
            let (hi, lo) = (group[p - 1], group[p]);
            bounds[lo].min = bounds[lo].min.min(bounds[hi].min);
        }
        for p in (1..group.len()).rev() {
            let (hi, lo) = (group[p - 1], group[p]);
            bounds[hi].max = bounds[hi].max.max(bounds[lo].max);
        }
    }

    let mut tolerances = Vec::with_capacity(layout.channels());
    for c in 0..layout.channels() {
        let max_jump = training
            .iter()
            .flat_map(|x| x.values[c * w..(c + 1) * w].windows(2).map(|p| (p[1] - p[0]).abs()))
            .fold(0.0f64, f64::max);
        let tol = max_jump * options.smoothness_factor;
        tolerances.push(if tol > 0.0 { tol } else { f64::EPSILON });
    }

    PhysicsSpec::new(layout.clone(), ordering_groups, bounds, tolerances, scaling)
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecFile {
    format: String,
    version: u32,
    channels: Vec<String>,
    windows: usize,
    penalty_mode: PenaltyMode,
    smoothness_tolerances: Vec<f64>,
    ordering_groups: Vec<Vec<usize>>,
    feature: Vec<FeatureRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    name: String,
    min: f64,
    max: f64,
    scale_min: f64,
    scale_max: f64,
}

impl From<&PhysicsSpec> for SpecFile {
    fn from(spec: &PhysicsSpec) -> Self {
        SpecFile {
            format: SPEC_FORMAT.into(),
            version: SPEC_VERSION,
            channels: spec.layout.channel_names.clone(),
            windows: spec.layout.windows,
            penalty_mode: spec.penalty_mode,
            smoothness_tolerances: spec.smoothness_tolerances.clone(),
            ordering_groups: spec.ordering_groups.clone(),
            feature: spec
                .layout
                .feature_names()
                .into_iter()
                .zip(spec.range_bounds.iter().zip(&spec.scaling))
                .map(|(name, (b, s))| FeatureRow {
                    name,
                    min: b.min,
                    max: b.max,
                    scale_min: s.min,
                    scale_max: s.max,
                })
                .collect(),
        }
    }
}

impl SpecFile {
    fn into_spec(self) -> Result<PhysicsSpec> {
        if self.format != SPEC_FORMAT {
            return Err(PgceError::InvalidSpec(format!("unknown format tag {}", self.format)));
        }
        if self.version != SPEC_VERSION {
            return Err(PgceError::UnsupportedVersion {
                kind: "physics spec",
                found: self.version,
                expected: SPEC_VERSION,
            });
        }
        let layout = FeatureLayout::new(self.channels, self.windows);
        let names = layout.feature_names();
        if self.feature.len() != names.len() {
            return Err(PgceError::dims(names.len(), self.feature.len()));
        }
        for (row, expected) in self.feature.iter().zip(&names) {
            if &row.name != expected {
                return Err(PgceError::InvalidSpec(format!(
                    "feature row {} out of canonical order (expected {expected})",
                    row.name
                )));
            }
        }
        let bounds = self.feature.iter().map(|r| Bounds { min: r.min, max: r.max }).collect();
        let scaling = self
            .feature
            .iter()
            .map(|r| Bounds {
                min: r.scale_min,
                max: r.scale_max,
            })
            .collect();
        Ok(PhysicsSpec::new(
            layout,
            self.ordering_groups,
            bounds,
            self.smoothness_tolerances,
            scaling,
        )?
        .with_penalty_mode(self.penalty_mode))
    }
}
