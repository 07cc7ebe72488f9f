//! Flux CSV and event catalog loading, dataset assembly and a synthetic
//! SEP-like event generator.
//!
//! Flux files use the header `timestamp,P3,P5,P7` (any channel names are
//! accepted after `timestamp`) with ISO-8601 timestamps at a constant cadence.
//! Catalogs use `start,end,label` with labels `SEP` / `non-SEP`; `end` is
//! exclusive.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeDelta, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::rng;
use crate::series::{extract_features, vectorize, FeatureLayout, FeatureVector, FluxSeries, Label, WindowGrid};

pub const TIMESTAMP_COLUMN: &str = "timestamp";
pub const CATALOG_HEADER: [&str; 3] = ["start", "end", "label"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelQuality {
    pub channel: String,
    pub non_positive: usize,
    pub non_numeric: usize,
    pub empty: usize,
}

impl ChannelQuality {
    pub fn missing(&self) -> usize {
        self.non_positive + self.non_numeric + self.empty
    }
}

/// Accounts for every sample excluded while loading a flux file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataQualityReport {
    pub rows: usize,
    pub cadence_seconds: i64,
    pub channels: Vec<ChannelQuality>,
}

fn parse_timestamp(text: &str) -> Option<DateTime<Utc>> {
    let text = text.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Some(t.with_timezone(&Utc));
    }
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
    .map(|n| Utc.from_utc_datetime(&n))
}

fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn schema(path: &Path, message: impl Into<String>) -> PgceError {
    PgceError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a flux CSV. Non-positive, non-numeric and empty values become
/// missing samples and are counted in the returned report.
pub fn load_flux_csv(path: &Path) -> Result<(FluxSeries, DataQualityReport)> {
    let file = std::fs::File::open(path).map_err(|e| PgceError::io(path, e))?;
    read_flux_csv(file, path)
}

/// [`load_flux_csv`] over any reader; `path` is only used in messages.
pub fn read_flux_csv<R: Read>(reader: R, path: &Path) -> Result<(FluxSeries, DataQualityReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0).map(str::trim) != Some(TIMESTAMP_COLUMN) {
        return Err(schema(path, format!("first column must be `{TIMESTAMP_COLUMN}`")));
    }
    let names: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    if names.is_empty() {
        return Err(schema(path, "no flux channel columns"));
    }
    let m = names.len();
    let mut quality: Vec<ChannelQuality> = names
        .iter()
        .map(|n| ChannelQuality {
            channel: n.clone(),
            non_positive: 0,
            non_numeric: 0,
            empty: 0,
        })
        .collect();
    let mut times = Vec::new();
    let mut values = vec![Vec::new(); m];
    let mut missing = vec![Vec::new(); m];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row + 2;
        if record.len() != m + 1 {
            return Err(schema(
                path,
                format!("line {line} has {} fields, expected {}", record.len(), m + 1),
            ));
        }
        let t = parse_timestamp(&record[0])
            .ok_or_else(|| schema(path, format!("line {line}: unparseable timestamp `{}`", &record[0])))?;
        times.push(t);
        for c in 0..m {
            let raw = record[c + 1].trim();
            let parsed = raw.parse::<f64>();
            let (v, miss) = match parsed {
                _ if raw.is_empty() => {
                    quality[c].empty += 1;
                    (0.0, true)
                }
                Ok(v) if v.is_finite() && v > 0.0 => (v, false),
                Ok(v) if v.is_finite() => {
                    quality[c].non_positive += 1;
                    (0.0, true)
                }
                _ => {
                    quality[c].non_numeric += 1;
                    (0.0, true)
                }
            };
            values[c].push(v);
            missing[c].push(miss);
        }
    }
    if times.is_empty() {
        return Err(PgceError::EmptyFile(path.to_path_buf()));
    }
    if times.len() < 2 {
        return Err(schema(path, "at least two rows are needed to infer the cadence"));
    }
    let cadence = times[1] - times[0];
    if cadence <= TimeDelta::zero() {
        return Err(PgceError::IrregularCadence {
            row: 1,
            message: "timestamps must be strictly increasing".into(),
        });
    }
    for (i, pair) in times.windows(2).enumerate() {
        let step = pair[1] - pair[0];
        if step != cadence {
            return Err(PgceError::IrregularCadence {
                row: i + 1,
                message: format!("step of {}s, expected {}s", step.num_seconds(), cadence.num_seconds()),
            });
        }
    }
    let report = DataQualityReport {
        rows: times.len(),
        cadence_seconds: cadence.num_seconds(),
        channels: quality,
    };
    let series = FluxSeries::new(times[0], cadence, names, values, missing)?;
    Ok((series, report))
}

/// Writes a series in the flux CSV schema; missing samples are left empty.
pub fn write_flux_csv<W: Write>(writer: W, series: &FluxSeries) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec![TIMESTAMP_COLUMN.to_string()];
    header.extend(series.channel_names().iter().cloned());
    out.write_record(&header)?;
    for i in 0..series.len() {
        let mut row = vec![format_timestamp(series.timestamp(i))];
        for c in 0..series.channel_count() {
            row.push(if series.is_missing(c, i) {
                String::new()
            } else {
                format!("{}", series.values(c)[i])
            });
        }
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| PgceError::io("<flux csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventCatalog {
    pub events: Vec<Event>,
    pub source_id: String,
}

impl EventCatalog {
    /// Sorts events by start time and rejects empty or overlapping intervals.
    pub fn new(mut events: Vec<Event>, source_id: impl Into<String>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.start >= e.end {
                return Err(PgceError::InvalidCatalog(format!(
                    "event {i} does not end after it starts"
                )));
            }
        }
        events.sort_by_key(|e| e.start);
        for pair in events.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(PgceError::InvalidCatalog(format!(
                    "events starting {} and {} overlap",
                    format_timestamp(pair[0].start),
                    format_timestamp(pair[1].start)
                )));
            }
        }
        Ok(EventCatalog {
            events,
            source_id: source_id.into(),
        })
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let sep = self.events.iter().filter(|e| e.label == Label::Sep).count();
        (self.events.len() - sep, sep)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| PgceError::io(path, e))?;
        Self::read(file, path)
    }

    pub fn read<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header != CATALOG_HEADER {
            return Err(schema(
                path,
                format!("catalog header must be `{}`", CATALOG_HEADER.join(",")),
            ));
        }
        let mut events = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let line = row + 2;
            let time = |k: usize| {
                parse_timestamp(&record[k])
                    .ok_or_else(|| schema(path, format!("line {line}: bad timestamp `{}`", &record[k])))
            };
            let label = Label::parse(record[2].trim())
                .ok_or_else(|| schema(path, format!("line {line}: label must be SEP or non-SEP")))?;
            events.push(Event {
                start: time(0)?,
                end: time(1)?,
                label,
            });
        }
        if events.is_empty() {
            return Err(PgceError::EmptyFile(path.to_path_buf()));
        }
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(events, source)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(CATALOG_HEADER)?;
        for e in &self.events {
            out.write_record([format_timestamp(e.start), format_timestamp(e.end), e.label.to_string()])?;
        }
        out.flush().map_err(|e| PgceError::io("<catalog csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    /// Fixed observation length per event, in samples.
    pub observation_samples: usize,
    pub window_samples: usize,
    /// Defaults to `window_samples` (non-overlapping windows).
    pub stride_samples: Option<usize>,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            observation_samples: 72,
            window_samples: 6,
            stride_samples: None,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetOptions {
    pub fn grid(&self) -> Result<WindowGrid> {
        WindowGrid::sliding(
            self.observation_samples,
            self.window_samples,
            self.stride_samples.unwrap_or(self.window_samples),
        )
    }
}

pub const DATASET_FORMAT: &str = "pgce-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub grid: WindowGrid,
    pub instances: Vec<FeatureVector>,
    /// Start sample of each instance's observation window in the source series.
    pub offsets: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn train_set(&self) -> Vec<FeatureVector> {
        self.train.iter().map(|&i| self.instances[i].clone()).collect()
    }

    pub fn test_set(&self) -> Vec<FeatureVector> {
        self.test.iter().map(|&i| self.instances[i].clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        if file.format != DATASET_FORMAT {
            return Err(PgceError::InvalidConfig(format!(
                "unknown dataset format {}",
                file.format
            )));
        }
        if file.version != DATASET_VERSION {
            return Err(PgceError::UnsupportedVersion {
                kind: "dataset",
                found: file.version,
                expected: DATASET_VERSION,
            });
        }
        let ds = file.dataset;
        let n = ds.instances.len();
        if ds.offsets.len() != n {
            return Err(PgceError::dims(n, ds.offsets.len()));
        }
        if let Some(&bad) = ds.train.iter().chain(&ds.test).find(|&&i| i >= n) {
            return Err(PgceError::InvalidConfig(format!("split index {bad} out of range")));
        }
        let d = ds.layout.dim();
        if let Some(bad) = ds.instances.iter().find(|x| x.dim() != d) {
            return Err(PgceError::dims(d, bad.dim()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| PgceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgceError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    dataset: Dataset,
}

/// Stratified, seeded split: each class contributes `round(fraction * n)`
/// instances to the test side, at least one when the class has two or more.
pub fn stratified_split(labels: &[u8], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(PgceError::InvalidConfig("test_fraction must lie in [0, 1)".into()));
    }
    let mut rng = rng::stream(seed, 0x5e11);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut k = (test_fraction * idx.len() as f64).round() as usize;
        if test_fraction > 0.0 && idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// One labeled feature vector per catalog event, plus a stratified split.
pub fn build_dataset(series: &FluxSeries, catalog: &EventCatalog, options: &DatasetOptions) -> Result<Dataset> {
    let grid = options.grid()?;
    let layout = FeatureLayout::new(series.channel_names().to_vec(), grid.window_count());
    let mut instances = Vec::with_capacity(catalog.events.len());
    let mut offsets = Vec::with_capacity(catalog.events.len());
    for (k, event) in catalog.events.iter().enumerate() {
        let outside = || PgceError::EventOutsideSeries {
            index: k,
            start: format_timestamp(event.start),
            end: format_timestamp(event.end),
        };
        let start = series.index_of(event.start).ok_or_else(outside)?;
        let end = series.index_of(event.end).ok_or_else(outside)?;
        if start < 0 || end > series.len() as i64 {
            return Err(outside());
        }
        let (start, end) = (start as usize, end as usize);
        if end - start != options.observation_samples {
            return Err(PgceError::EventLengthMismatch {
                index: k,
                expected: options.observation_samples,
                actual: end - start,
            });
        }
        let segment = series.segment(start, end - start)?;
        let x = vectorize(&extract_features(&segment, &grid)?).with_label(event.label);
        instances.push(x);
        offsets.push(start);
    }
    let labels: Vec<u8> = instances
        .iter()
        .map(|x| x.label.expect("labeled").class_index())
        .collect();
    let (train, test) = stratified_split(&labels, options.test_fraction, options.seed)?;
    Ok(Dataset {
        layout,
        grid,
        instances,
        offsets,
        train,
        test,
    })
}

/// How non-SEP observation windows are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonSepMode {
    /// Noisy baseline only.
    Quiet,
    /// Baseline with a weak, sub-threshold enhancement.
    PreEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_sep: usize,
    pub n_non_sep: usize,
    pub cadence_minutes: i64,
    pub duration_samples: usize,
    /// Quiet samples between consecutive events.
    pub gap_samples: usize,
    pub channel_names: Vec<String>,
    /// Quiet-time flux per channel, strictly decreasing.
    pub base_levels: Vec<f64>,
    /// Per-event baseline factor is `exp(U(-v, v))`.
    pub base_variation: f64,
    /// Peak enhancement of the first channel, as a multiple of its baseline.
    pub amplitude_range: (f64, f64),
    /// Peak enhancement ratio between consecutive channels.
    pub channel_ratio: f64,
    /// Onset delay between consecutive channels, in samples.
    pub channel_delay: usize,
    pub rise_samples: usize,
    pub decay_samples: f64,
    /// Onset position as a fraction of the observation window.
    pub onset_range: (f64, f64),
    /// Standard deviation of multiplicative log-normal noise.
    pub noise: f64,
    pub non_sep_mode: NonSepMode,
    /// Pre-event peak as a fraction of the smallest SEP amplitude.
    pub pre_event_fraction: f64,
    pub start: DateTime<Utc>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_sep: 50,
            n_non_sep: 50,
            cadence_minutes: 5,
            duration_samples: 72,
            gap_samples: 12,
            channel_names: vec!["P3".into(), "P5".into(), "P7".into()],
            base_levels: vec![1.0, 0.3, 0.1],
            base_variation: 0.2,
            amplitude_range: (5.0, 50.0),
            channel_ratio: 0.6,
            channel_delay: 3,
            rise_samples: 6,
            decay_samples: 24.0,
            onset_range: (0.7, 0.85),
            noise: 0.1,
            non_sep_mode: NonSepMode::Quiet,
            pre_event_fraction: 0.1,
            start: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PgceError::InvalidConfig(m));
        if self.channel_names.is_empty() || self.channel_names.len() != self.base_levels.len() {
            return fail("one base level per channel is required".into());
        }
        if self.base_levels.iter().any(|b| b.is_nan() || *b <= 0.0) || self.base_levels.windows(2).any(|w| w[1] >= w[0])
        {
            return fail("base levels must be positive and strictly decreasing".into());
        }
        if self.noise.is_nan() || self.noise < 0.0 || self.base_variation.is_nan() || self.base_variation < 0.0 {
            return fail("noise and base_variation must be >= 0".into());
        }
        if self.cadence_minutes <= 0 || self.duration_samples == 0 || self.rise_samples == 0 {
            return fail("cadence, duration and rise time must be positive".into());
        }
        let (a0, a1) = self.amplitude_range;
        if !(a0 > 0.0 && a1 >= a0) {
            return fail("amplitude_range must satisfy 0 < min <= max".into());
        }
        let (o0, o1) = self.onset_range;
        if !(0.0..=1.0).contains(&o0) || !(o0..=1.0).contains(&o1) {
            return fail("onset_range must satisfy 0 <= min <= max <= 1".into());
        }
        if self.decay_samples.is_nan() || self.decay_samples <= 0.0 {
            return fail("decay_samples must be positive".into());
        }
        // A delayed channel decays from its peak later; its enhancement stays
        // below the previous channel's only if the ratio absorbs the delay.
        let limit = (-(self.channel_delay as f64) / self.decay_samples).exp();
        if !(self.channel_ratio > 0.0 && self.channel_ratio <= limit) {
            return fail(format!(
                "channel_ratio must lie in (0, {limit:.4}] for the configured delay and decay"
            ));
        }
        if !(0.0..1.0).contains(&self.pre_event_fraction) {
            return fail("pre_event_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Ramp-and-decay profile, 0 before onset and peaking at 1.
    fn profile(&self, t: f64) -> f64 {
        let rise = self.rise_samples as f64;
        if t < 0.0 {
            0.0
        } else if t < rise {
            t / rise
        } else {
            (-(t - rise) / self.decay_samples).exp()
        }
    }
}

/// Generates one series of back-to-back observation windows and its catalog.
/// Event classes are interleaved in a seeded random order.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(FluxSeries, EventCatalog)> {
    config.validate()?;
    let m = config.channel_names.len();
    let n_events = config.n_sep + config.n_non_sep;
    let len = config.duration_samples;
    let total = config.gap_samples + n_events * (len + config.gap_samples);
    let cadence = TimeDelta::minutes(config.cadence_minutes);
    let mut rng = rng::seeded(config.seed);

    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Sep, config.n_sep)
        .chain(std::iter::repeat_n(Label::NonSep, config.n_non_sep))
        .collect();
    labels.shuffle(&mut rng);

    let noise = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if config.noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            (config.noise * z).exp()
        } else {
            1.0
        }
    };
    let variation = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if config.base_variation > 0.0 {
            rng.random_range(-config.base_variation..=config.base_variation).exp()
        } else {
            1.0
        }
    };

    let mut values = vec![vec![0.0; total]; m];
    let mut cursor = 0;
    let fill_quiet = |values: &mut Vec<Vec<f64>>, from: usize, to: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        for row in values.iter_mut().zip(&config.base_levels) {
            for v in &mut row.0[from..to] {
                *v = row.1 * noise(rng);
            }
        }
    };
    let mut events = Vec::with_capacity(n_events);
    for label in labels {
        fill_quiet(&mut values, cursor, cursor + config.gap_samples, &mut rng);
        cursor += config.gap_samples;
        let factor = variation(&mut rng);
        let amplitude = match (label, config.non_sep_mode) {
            (Label::Sep, _) => {
                let (lo, hi) = config.amplitude_range;
                if hi > lo {
                    (rng.random_range(lo.ln()..=hi.ln())).exp()
                } else {
                    lo
                }
            }
            (Label::NonSep, NonSepMode::Quiet) => 0.0,
            (Label::NonSep, NonSepMode::PreEvent) => {
                config.pre_event_fraction * config.amplitude_range.0 * rng.random_range(0.5..=1.0)
            }
        };
        let (o0, o1) = config.onset_range;
        let onset = if o1 > o0 { rng.random_range(o0..=o1) } else { o0 } * len as f64;
        for (c, row) in values.iter_mut().enumerate() {
            let base = config.base_levels[c] * factor;
            let peak = amplitude * config.channel_ratio.powi(c as i32);
            let delay = (c * config.channel_delay) as f64;
            for t in 0..len {
                let f = config.profile(t as f64 - onset - delay);
                row[cursor + t] = base * (1.0 + peak * f) * noise(&mut rng);
            }
        }
        events.push(Event {
            start: config.start + cadence * cursor as i32,
            end: config.start + cadence * (cursor + len) as i32,
            label,
        });
        cursor += len;
    }
    fill_quiet(&mut values, cursor, total, &mut rng);
    let series = FluxSeries::from_complete(config.start, cadence, config.channel_names.clone(), values)?;
    let catalog = EventCatalog::new(events, format!("synthetic-seed-{}", config.seed))?;
    Ok((series, catalog))
}

/// Per-label event counts, keyed by label text.
pub fn catalog_summary(catalog: &EventCatalog) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in &catalog.events {
        *out.entry(e.label.to_string()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{fit_spec, FitOptions};

    fn parse(text: &str) -> Result<(FluxSeries, DataQualityReport)> {
        read_flux_csv(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn well_formed_file() {
        let text = "timestamp,P3,P5,P7\n2020-01-01T00:00:00Z,10,5,1\n2020-01-01T00:05:00Z,11,6,2\n2020-01-01T00:10:00Z,12,7,3\n";
        let (s, q) = parse(text).unwrap();
        assert_eq!(s.channel_count(), 3);
        assert_eq!(s.len(), 3);
        assert_eq!(s.cadence(), TimeDelta::minutes(5));
        assert_eq!(s.values(1), &[5.0, 6.0, 7.0]);
        assert_eq!(q.channels.iter().map(ChannelQuality::missing).sum::<usize>(), 0);
    }

    #[test]
    fn bad_values_become_missing() {
        let text =
            "timestamp,P3,P5,P7\n2020-01-01 00:00:00,10,-1,1\n2020-01-01 00:05:00,abc,6,\n2020-01-01 00:10:00,0,7,3\n";
        let (s, q) = parse(text).unwrap();
        assert!(s.is_missing(1, 0));
        assert!(s.is_missing(0, 1) && s.is_missing(2, 1) && s.is_missing(0, 2));
        assert_eq!(q.channels[0].non_numeric, 1);
        assert_eq!(q.channels[0].non_positive, 1);
        assert_eq!(q.channels[1].non_positive, 1);
        assert_eq!(q.channels[2].empty, 1);
        assert_eq!(q.rows, 3);
    }

    #[test]
    fn schema_and_cadence_errors() {
        assert!(matches!(
            parse("time,P3\n2020-01-01T00:00:00Z,1\n"),
            Err(PgceError::Schema { .. })
        ));
        assert!(matches!(parse("timestamp,P3\n"), Err(PgceError::EmptyFile(_))));
        let shuffled = "timestamp,P3\n2020-01-01T00:10:00Z,1\n2020-01-01T00:00:00Z,1\n2020-01-01T00:05:00Z,1\n";
        assert!(matches!(parse(shuffled), Err(PgceError::IrregularCadence { .. })));
        let gap = "timestamp,P3\n2020-01-01T00:00:00Z,1\n2020-01-01T00:05:00Z,1\n2020-01-01T00:15:00Z,1\n";
        assert!(matches!(parse(gap), Err(PgceError::IrregularCadence { row: 2, .. })));
        assert!(matches!(
            parse("timestamp,P3\nnot-a-time,1\n"),
            Err(PgceError::Schema { .. })
        ));
    }

    #[test]
    fn flux_csv_round_trip() {
        let (s, _) = generate_synthetic(&SyntheticConfig {
            n_sep: 2,
            n_non_sep: 2,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_flux_csv(&mut buf, &s).unwrap();
        let (back, _) = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    fn catalog_events(n_sep: usize, n_non: usize, len: i32) -> Vec<Event> {
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        (0..n_sep + n_non)
            .map(|k| Event {
                start: t0 + TimeDelta::minutes(5) * (k as i32 * len),
                end: t0 + TimeDelta::minutes(5) * ((k as i32 + 1) * len),
                label: if k < n_sep { Label::Sep } else { Label::NonSep },
            })
            .collect()
    }

    #[test]
    fn catalog_validation_and_round_trip() {
        let cat = EventCatalog::new(catalog_events(2, 2, 4), "t").unwrap();
        let mut buf = Vec::new();
        cat.write(&mut buf).unwrap();
        let back = EventCatalog::read(buf.as_slice(), Path::new("t.csv")).unwrap();
        assert_eq!(back, cat);
        let mut overlapping = catalog_events(1, 1, 4);
        overlapping[1].start = overlapping[0].start + TimeDelta::minutes(5);
        assert!(matches!(
            EventCatalog::new(overlapping, "x"),
            Err(PgceError::InvalidCatalog(_))
        ));
        let mut empty = catalog_events(1, 0, 4);
        empty[0].end = empty[0].start;
        assert!(EventCatalog::new(empty, "x").is_err());
        assert!(matches!(
            EventCatalog::read("begin,end,label\n".as_bytes(), Path::new("c.csv")),
            Err(PgceError::Schema { .. })
        ));
    }

    fn flat_series(samples: usize) -> FluxSeries {
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let rows = vec![(0..samples).map(|i| 10.0 + i as f64).collect(), vec![1.0; samples]];
        FluxSeries::from_complete(t0, TimeDelta::minutes(5), vec!["P3".into(), "P5".into()], rows).unwrap()
    }

    #[test]
    fn dataset_split_counts_and_determinism() {
        let cat = EventCatalog::new(catalog_events(10, 10, 4), "t").unwrap();
        let s = flat_series(80);
        let opts = DatasetOptions {
            observation_samples: 4,
            window_samples: 2,
            ..Default::default()
        };
        let ds = build_dataset(&s, &cat, &opts).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (16, 4));
        for side in [&ds.train, &ds.test] {
            let sep = side
                .iter()
                .filter(|&&i| ds.instances[i].label == Some(Label::Sep))
                .count();
            assert!(sep > 0 && sep < side.len());
        }
        assert!(ds.instances.iter().all(|x| x.dim() == 4));
        assert_eq!(ds.instances[0].values, vec![10.5, 12.5, 1.0, 1.0]);
        assert_eq!(build_dataset(&s, &cat, &opts).unwrap(), ds);
    }

    #[test]
    fn dataset_errors() {
        let cat = EventCatalog::new(catalog_events(3, 3, 4), "t").unwrap();
        let opts = DatasetOptions {
            observation_samples: 4,
            window_samples: 2,
            ..Default::default()
        };
        assert!(matches!(
            build_dataset(&flat_series(20), &cat, &opts),
            Err(PgceError::EventOutsideSeries { index: 5, .. })
        ));
        let wrong_len = DatasetOptions {
            observation_samples: 6,
            ..opts
        };
        assert!(matches!(
            build_dataset(&flat_series(24), &cat, &wrong_len),
            Err(PgceError::EventLengthMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_cardinality_and_determinism() {
        let cfg = SyntheticConfig::default();
        let (s, cat) = generate_synthetic(&cfg).unwrap();
        assert_eq!(cat.events.len(), 100);
        assert_eq!(cat.label_counts(), (50, 50));
        let (s2, cat2) = generate_synthetic(&cfg).unwrap();
        assert_eq!((s, cat), (s2, cat2));
    }

    #[test]
    fn noiseless_synthetic_is_ordered() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..Default::default()
        };
        let (s, _) = generate_synthetic(&cfg).unwrap();
        for t in 0..s.len() {
            assert!(
                s.values(0)[t] >= s.values(1)[t] && s.values(1)[t] >= s.values(2)[t],
                "sample {t}"
            );
        }
    }

    #[test]
    fn noisy_synthetic_windows_mostly_ordered() {
        let cfg = SyntheticConfig::default();
        let (s, cat) = generate_synthetic(&cfg).unwrap();
        let ds = build_dataset(&s, &cat, &DatasetOptions::default()).unwrap();
        let spec = fit_spec(&ds.instances, &ds.layout, FitOptions::default()).unwrap();
        let groups = spec.ordering_groups().len() * ds.instances.len();
        let bad: usize = ds
            .instances
            .iter()
            .map(|x| {
                spec.ordering_groups()
                    .iter()
                    .filter(|g| g.windows(2).any(|p| x.values[p[0]] < x.values[p[1]]))
                    .count()
            })
            .sum();
        assert!(
            (bad as f64) <= 0.01 * groups as f64,
            "{bad} of {groups} windows out of order"
        );
    }

    #[test]
    fn synthetic_config_validation() {
        let bad = [
            SyntheticConfig {
                base_levels: vec![1.0, 1.0, 0.1],
                ..Default::default()
            },
            SyntheticConfig {
                noise: -0.1,
                ..Default::default()
            },
            SyntheticConfig {
                channel_ratio: 0.99,
                ..Default::default()
            },
            SyntheticConfig {
                base_levels: vec![1.0],
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg), Err(PgceError::InvalidConfig(_))));
        }
    }

    #[test]
    fn pre_event_mode_is_weaker_than_sep() {
        let cfg = SyntheticConfig {
            non_sep_mode: NonSepMode::PreEvent,
            noise: 0.0,
            base_variation: 0.0,
            ..Default::default()
        };
        let (s, cat) = generate_synthetic(&cfg).unwrap();
        let ds = build_dataset(&s, &cat, &DatasetOptions::default()).unwrap();
        let peak = |label| {
            ds.instances
                .iter()
                .filter(|x| x.label == Some(label))
                .map(|x| x.values.iter().cloned().fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min)
        };
        let max_non = ds
            .instances
            .iter()
            .filter(|x| x.label == Some(Label::NonSep))
            .map(|x| x.values.iter().cloned().fold(0.0, f64::max))
            .fold(0.0, f64::max);
        assert!(max_non > 1.0);
        assert!(max_non < peak(Label::Sep));
    }
}
