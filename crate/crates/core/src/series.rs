//! Multivariate flux series, sliding-window grids and the window-mean feature
//! matrix, plus the flat vector layout the optimizer works on.
//!
//! Features are laid out channel-major: all windows of channel 0, then all
//! windows of channel 1, and so on. The feature at `(channel i, window j)`
//! lives at index `i * W + j` and is named `<channel>_w<j+1>`.

use std::fmt;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};

/// Binary class label. `NonSep` is class 0, `Sep` is class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "non-SEP")]
    NonSep,
    #[serde(rename = "SEP")]
    Sep,
}

impl Label {
    pub fn class_index(self) -> u8 {
        match self {
            Label::NonSep => 0,
            Label::Sep => 1,
        }
    }

    pub fn from_class(class: u8) -> Option<Label> {
        match class {
            0 => Some(Label::NonSep),
            1 => Some(Label::Sep),
            _ => None,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::NonSep => Label::Sep,
            Label::Sep => Label::NonSep,
        }
    }

    pub fn parse(text: &str) -> Option<Label> {
        match text.trim() {
            "SEP" => Some(Label::Sep),
            "non-SEP" => Some(Label::NonSep),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::NonSep => f.write_str("non-SEP"),
            Label::Sep => f.write_str("SEP"),
        }
    }
}

/// Raw multi-channel flux measurements at a fixed cadence.
///
/// Channel 0 is the lowest-energy (highest-flux) channel. Values under a set
/// missing flag are meaningless and are stored as `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSeries {
    start_time: DateTime<Utc>,
    cadence: TimeDelta,
    channel_names: Vec<String>,
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
}

impl FluxSeries {
    pub fn new(
        start_time: DateTime<Utc>,
        cadence: TimeDelta,
        channel_names: Vec<String>,
        values: Vec<Vec<f64>>,
        missing: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if cadence <= TimeDelta::zero() {
            return Err(PgceError::InvalidSeries("cadence must be positive".into()));
        }
        if channel_names.is_empty() {
            return Err(PgceError::InvalidSeries("series has no channels".into()));
        }
        for (i, name) in channel_names.iter().enumerate() {
            if name.is_empty() {
                return Err(PgceError::InvalidSeries(format!("channel {i} has an empty name")));
            }
            if channel_names[..i].contains(name) {
                return Err(PgceError::InvalidSeries(format!("duplicate channel name {name}")));
            }
        }
        if values.len() != channel_names.len() || missing.len() != channel_names.len() {
            return Err(PgceError::dims(channel_names.len(), values.len()));
        }
        let len = values[0].len();
        for (row, mask) in values.iter().zip(&missing) {
            if row.len() != len {
                return Err(PgceError::dims(len, row.len()));
            }
            if mask.len() != len {
                return Err(PgceError::dims(len, mask.len()));
            }
        }
        let mut values = values;
        for (row, mask) in values.iter_mut().zip(&missing) {
            for (v, &m) in row.iter_mut().zip(mask) {
                if m {
                    *v = 0.0;
                } else if !v.is_finite() {
                    return Err(PgceError::InvalidSeries("non-missing sample is not finite".into()));
                }
            }
        }
        Ok(FluxSeries {
            start_time,
            cadence,
            channel_names,
            values,
            missing,
        })
    }

    /// Builds a series with no missing samples.
    pub fn from_complete(
        start_time: DateTime<Utc>,
        cadence: TimeDelta,
        channel_names: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let missing = values.iter().map(|row| vec![false; row.len()]).collect();
        Self::new(start_time, cadence, channel_names, values, missing)
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start_time
    }

    pub fn cadence(&self) -> TimeDelta {
        self.cadence
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel_count(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == name)
    }

    pub fn values(&self, channel: usize) -> &[f64] {
        &self.values[channel]
    }

    pub fn missing(&self, channel: usize) -> &[bool] {
        &self.missing[channel]
    }

    pub fn is_missing(&self, channel: usize, index: usize) -> bool {
        self.missing[channel][index]
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start_time + self.cadence * index as i32
    }

    /// Sample index of `time`, if it falls exactly on the cadence grid.
    pub fn index_of(&self, time: DateTime<Utc>) -> Option<i64> {
        let offset = time - self.start_time;
        let step = self.cadence.num_milliseconds();
        let ms = offset.num_milliseconds();
        (ms % step == 0).then_some(ms / step)
    }

    /// Copies samples `[start, start + len)` into a new series.
    pub fn segment(&self, start: usize, len: usize) -> Result<FluxSeries> {
        if start + len > self.len() {
            return Err(PgceError::InvalidSeries(format!(
                "segment [{start}, {}) exceeds series length {}",
                start + len,
                self.len()
            )));
        }
        Ok(FluxSeries {
            start_time: self.timestamp(start),
            cadence: self.cadence,
            channel_names: self.channel_names.clone(),
            values: self.values.iter().map(|r| r[start..start + len].to_vec()).collect(),
            missing: self.missing.iter().map(|r| r[start..start + len].to_vec()).collect(),
        })
    }
}

/// Sample-index windows over a series. Boundaries are half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    window_length: usize,
    stride: usize,
    boundaries: Vec<(usize, usize)>,
}

impl WindowGrid {
    /// Regular grid of `window_length`-sample windows every `stride` samples over
    /// `total_samples`. A trailing partial window is dropped.
    pub fn sliding(total_samples: usize, window_length: usize, stride: usize) -> Result<Self> {
        if window_length == 0 || stride == 0 {
            return Err(PgceError::InvalidGrid(
                "window length and stride must be positive".into(),
            ));
        }
        if window_length > total_samples {
            return Err(PgceError::InvalidGrid(format!(
                "window of {window_length} samples does not fit in {total_samples}"
            )));
        }
        let boundaries = (0..)
            .map(|k| k * stride)
            .take_while(|s| s + window_length <= total_samples)
            .map(|s| (s, s + window_length))
            .collect();
        Ok(WindowGrid {
            window_length,
            stride,
            boundaries,
        })
    }

    /// Grid from a duration-based window definition.
    pub fn from_durations(
        total_samples: usize,
        cadence: TimeDelta,
        window: TimeDelta,
        stride: TimeDelta,
    ) -> Result<Self> {
        let step = cadence.num_seconds();
        if step <= 0 || window.num_seconds() % step != 0 || stride.num_seconds() % step != 0 {
            return Err(PgceError::InvalidGrid(
                "window and stride must be whole multiples of the cadence".into(),
            ));
        }
        Self::sliding(
            total_samples,
            (window.num_seconds() / step) as usize,
            (stride.num_seconds() / step) as usize,
        )
    }

    /// Arbitrary boundaries, e.g. hand-picked slices. `window_length` and
    /// `stride` report the first window's span and the first gap.
    pub fn from_boundaries(boundaries: Vec<(usize, usize)>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(PgceError::InvalidGrid("grid has no windows".into()));
        }
        for (k, &(s, e)) in boundaries.iter().enumerate() {
            if e <= s {
                return Err(PgceError::InvalidGrid(format!("window {k} [{s}, {e}) is empty")));
            }
            if k > 0 && boundaries[k - 1] > (s, e) {
                return Err(PgceError::InvalidGrid("boundaries are not sorted".into()));
            }
        }
        let window_length = boundaries[0].1 - boundaries[0].0;
        let stride = boundaries
            .get(1)
            .map(|b| b.0 - boundaries[0].0)
            .unwrap_or(window_length);
        Ok(WindowGrid {
            window_length,
            stride,
            boundaries,
        })
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn window_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }

    /// One past the last sample any window touches.
    pub fn extent(&self) -> usize {
        self.boundaries.iter().map(|b| b.1).max().unwrap_or(0)
    }

    /// True when some sample belongs to more than one window.
    pub fn is_overlapping(&self) -> bool {
        self.boundaries.windows(2).any(|w| w[1].0 < w[0].1)
    }
}

/// Channel names plus window count; fixes the naming and indexing contract
/// between the optimizer output and reconstruction input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub channel_names: Vec<String>,
    pub windows: usize,
}

impl FeatureLayout {
    pub fn new(channel_names: Vec<String>, windows: usize) -> Self {
        FeatureLayout { channel_names, windows }
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn dim(&self) -> usize {
        self.channels() * self.windows
    }

    pub fn index(&self, channel: usize, window: usize) -> usize {
        channel * self.windows + window
    }

    /// Canonical `<channel>_w<j>` name with 1-based `j`.
    pub fn feature_name(&self, channel: usize, window: usize) -> String {
        format!("{}_w{}", self.channel_names[channel], window + 1)
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.channels())
            .flat_map(|c| (0..self.windows).map(move |w| (c, w)))
            .map(|(c, w)| self.feature_name(c, w))
            .collect()
    }

    /// Inverse of [`FeatureLayout::feature_name`].
    pub fn parse_name(&self, name: &str) -> Option<(usize, usize)> {
        let (channel, window) = name.rsplit_once("_w")?;
        let c = self.channel_names.iter().position(|n| n == channel)?;
        let w: usize = window.parse().ok()?;
        (w >= 1 && w <= self.windows).then_some((c, w - 1))
    }
}

/// Per-channel per-window feature values `x_i[w_j]`, row-major by channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    channel_names: Vec<String>,
    windows: usize,
    entries: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(channel_names: Vec<String>, windows: usize, entries: Vec<f64>) -> Result<Self> {
        let expected = channel_names.len() * windows;
        if entries.len() != expected {
            return Err(PgceError::dims(expected, entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(PgceError::InvalidSeries("feature matrix entry is not finite".into()));
        }
        Ok(FeatureMatrix {
            channel_names,
            windows,
            entries,
        })
    }

    /// Builds a matrix from `rows[channel][window]`.
    pub fn from_rows(channel_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != channel_names.len() {
            return Err(PgceError::dims(channel_names.len(), rows.len()));
        }
        let windows = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != windows) {
            return Err(PgceError::dims(windows, bad.len()));
        }
        Self::new(channel_names, windows, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn get(&self, channel: usize, window: usize) -> f64 {
        self.entries[channel * self.windows + window]
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.entries[channel * self.windows..(channel + 1) * self.windows]
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.channel_names.clone(), self.windows)
    }
}

/// Flat feature vector `x = vec(X)` with canonical names and an optional label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, names: Vec<String>, label: Option<Label>) -> Result<Self> {
        if values.len() != names.len() {
            return Err(PgceError::dims(names.len(), values.len()));
        }
        Ok(FeatureVector { values, names, label })
    }

    pub fn with_layout(values: Vec<f64>, layout: &FeatureLayout) -> Result<Self> {
        Self::new(values, layout.feature_names(), None)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_values(&self, values: Vec<f64>) -> FeatureVector {
        debug_assert_eq!(values.len(), self.values.len());
        FeatureVector {
            values,
            names: self.names.clone(),
            label: None,
        }
    }
}

/// Mean of the non-missing samples of each channel inside each window.
pub fn extract_features(series: &FluxSeries, grid: &WindowGrid) -> Result<FeatureMatrix> {
    if grid.extent() > series.len() {
        return Err(PgceError::dims(grid.extent(), series.len()));
    }
    let m = series.channel_count();
    let mut entries = Vec::with_capacity(m * grid.window_count());
    for c in 0..m {
        let values = series.values(c);
        let missing = series.missing(c);
        for (j, &(s, e)) in grid.boundaries().iter().enumerate() {
            let (sum, n) = values[s..e]
                .iter()
                .zip(&missing[s..e])
                .filter(|(_, &miss)| !miss)
                .fold((0.0, 0usize), |(sum, n), (v, _)| (sum + v, n + 1));
            if n == 0 {
                return Err(PgceError::EmptyWindow {
                    channel: series.channel_names()[c].clone(),
                    window: j,
                });
            }
            entries.push(sum / n as f64);
        }
    }
    FeatureMatrix::new(series.channel_names().to_vec(), grid.window_count(), entries)
}

pub fn vectorize(matrix: &FeatureMatrix) -> FeatureVector {
    FeatureVector {
        values: matrix.entries.clone(),
        names: matrix.layout().feature_names(),
        label: None,
    }
}

/// Inverse of [`vectorize`]. Channel names are taken from the vector's
/// feature names when they follow the canonical convention, and fall back to
/// `c1..cm` otherwise.
pub fn unvectorize(x: &FeatureVector, channels: usize, windows: usize) -> Result<FeatureMatrix> {
    let expected = channels * windows;
    if x.dim() != expected {
        return Err(PgceError::dims(expected, x.dim()));
    }
    let names = (0..channels)
        .map(|c| {
            x.names
                .get(c * windows)
                .and_then(|n| n.strip_suffix("_w1"))
                .map(str::to_owned)
                .unwrap_or_else(|| format!("c{}", c + 1))
        })
        .collect();
    FeatureMatrix::new(names, windows, x.values.clone())
}
