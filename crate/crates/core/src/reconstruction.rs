//! Maps a counterfactual feature vector back onto a raw time series.
//!
//! Each grid slice contributes a constant shift equal to the difference
//! between its counterfactual mean and its original mean. Samples covered by
//! several slices receive the average of their shifts.

use std::io::Write;

use chrono::{DateTime, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::genetic::CounterfactualSet;
use crate::series::{FeatureVector, FluxSeries, WindowGrid};

/// Tolerance on slice-mean residuals for non-overlapped slices.
pub const MEAN_MATCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAdjustment {
    /// Slice bounds in series sample indices.
    pub start: usize,
    pub end: usize,
    pub original_mean: f64,
    pub target_mean: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub channel: String,
    /// Sample index of the first reconstructed point within the source series.
    pub window_start: usize,
    pub start_time: DateTime<Utc>,
    pub cadence_seconds: i64,
    pub original: Vec<f64>,
    pub offsets: Vec<f64>,
    pub perturbed: Vec<f64>,
    /// Samples flagged missing in the source; never shifted.
    pub missing: Vec<bool>,
    pub value_range: (f64, f64),
    pub slice_coverage: Vec<u32>,
    pub slices: Vec<SliceAdjustment>,
}

impl ReconstructionResult {
    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start_time + chrono::TimeDelta::seconds(self.cadence_seconds * i as i64)
    }
}

fn mean_present(values: &[f64], missing: &[bool]) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .zip(missing)
        .filter(|(_, &m)| !m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Reconstructs one channel over `window = [t_start, t_end)` (series sample
/// indices). Grid boundaries are relative to `t_start`.
pub fn reconstruct(
    series: &FluxSeries,
    cfe: &FeatureVector,
    grid: &WindowGrid,
    channel: usize,
    window: (usize, usize),
) -> Result<ReconstructionResult> {
    let (t_start, t_end) = window;
    if t_start >= t_end || t_end > series.len() {
        return Err(PgceError::SliceOutsideWindow {
            start: t_start,
            end: t_end,
            window_start: 0,
            window_end: series.len(),
        });
    }
    if channel >= series.channel_count() {
        return Err(PgceError::InvalidSeries(format!("no channel with index {channel}")));
    }
    let name = &series.channel_names()[channel];
    let values = &series.values(channel)[t_start..t_end];
    let missing = &series.missing(channel)[t_start..t_end];
    let n = values.len();

    let mut accum = vec![0.0; n];
    let mut count = vec![0u32; n];
    let mut slices = Vec::with_capacity(grid.window_count());
    for (j, &(s, e)) in grid.boundaries().iter().enumerate() {
        if e > n {
            return Err(PgceError::SliceOutsideWindow {
                start: t_start + s,
                end: t_start + e,
                window_start: t_start,
                window_end: t_end,
            });
        }
        let feature = format!("{name}_w{}", j + 1);
        let target = cfe
            .names
            .iter()
            .position(|f| *f == feature)
            .map(|k| cfe.values[k])
            .ok_or_else(|| PgceError::MissingCfeFeature(feature.clone()))?;
        let original_mean = mean_present(&values[s..e], &missing[s..e]).ok_or_else(|| PgceError::EmptyWindow {
            channel: name.clone(),
            window: j,
        })?;
        let delta = target - original_mean;
        for t in s..e {
            if !missing[t] {
                accum[t] += delta;
                count[t] += 1;
            }
        }
        slices.push(SliceAdjustment {
            start: t_start + s,
            end: t_start + e,
            original_mean,
            target_mean: target,
            delta,
        });
    }

    let offsets: Vec<f64> = accum
        .iter()
        .zip(&count)
        .map(|(a, &c)| if c > 0 { a / c as f64 } else { 0.0 })
        .collect();
    let perturbed: Vec<f64> = values.iter().zip(&offsets).map(|(y, o)| y + o).collect();
    let present = |arr: &[f64]| -> Vec<f64> { arr.iter().zip(missing).filter(|(_, &m)| !m).map(|(v, _)| *v).collect() };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in present(values)
        .into_iter()
        .chain(offsets.iter().copied())
        .chain(present(&perturbed))
    {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(ReconstructionResult {
        channel: name.clone(),
        window_start: t_start,
        start_time: series.timestamp(t_start),
        cadence_seconds: series.cadence().num_seconds(),
        original: values.to_vec(),
        offsets,
        perturbed,
        missing: missing.to_vec(),
        value_range: (lo, hi),
        slice_coverage: count,
        slices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResidual {
    pub window: usize,
    pub start: usize,
    pub end: usize,
    pub target_mean: f64,
    pub reconstructed_mean: f64,
    pub residual: f64,
    pub overlapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub channel: String,
    pub slices: Vec<SliceResidual>,
    /// Largest |residual| over slices no other slice overlaps.
    pub max_exclusive_residual: f64,
    pub max_adjacent_jump: f64,
    pub negative_samples: usize,
    /// True when every non-overlapped slice matches within [`MEAN_MATCH_TOLERANCE`].
    pub mean_match: bool,
}

/// Checks the perturbed series against the counterfactual slice means.
/// Slices that share samples with another slice are reported but not gated.
pub fn verify_reconstruction(
    result: &ReconstructionResult,
    cfe: &FeatureVector,
    grid: &WindowGrid,
) -> ReconstructionReport {
    let n = result.perturbed.len();
    let mut slices = Vec::new();
    let mut max_exclusive: f64 = 0.0;
    for (j, &(s, e)) in grid.boundaries().iter().enumerate() {
        if e > n {
            continue;
        }
        let feature = format!("{}_w{}", result.channel, j + 1);
        let Some(k) = cfe.names.iter().position(|f| *f == feature) else {
            continue;
        };
        let Some(mean) = mean_present(&result.perturbed[s..e], &result.missing[s..e]) else {
            continue;
        };
        let overlapped = result.slice_coverage[s..e].iter().any(|&c| c > 1);
        let residual = mean - cfe.values[k];
        if !overlapped {
            max_exclusive = max_exclusive.max(residual.abs());
        }
        slices.push(SliceResidual {
            window: j,
            start: result.window_start + s,
            end: result.window_start + e,
            target_mean: cfe.values[k],
            reconstructed_mean: mean,
            residual,
            overlapped,
        });
    }
    let present: Vec<f64> = result
        .perturbed
        .iter()
        .zip(&result.missing)
        .filter(|(_, &m)| !m)
        .map(|(v, _)| *v)
        .collect();
    let max_adjacent_jump = present.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    ReconstructionReport {
        channel: result.channel.clone(),
        slices,
        max_exclusive_residual: max_exclusive,
        max_adjacent_jump,
        negative_samples: present.iter().filter(|v| **v < 0.0).count(),
        mean_match: max_exclusive <= MEAN_MATCH_TOLERANCE,
    }
}

#[derive(Debug)]
pub struct ReconstructionItem {
    pub candidate: usize,
    pub channel: usize,
    pub result: Result<ReconstructionResult>,
}

/// Reconstructs every channel of every candidate vector. Each item carries its
/// own result so one failure does not abort the batch.
pub fn reconstruct_candidates(
    series: &FluxSeries,
    candidates: &[FeatureVector],
    grid: &WindowGrid,
    window: (usize, usize),
) -> Vec<ReconstructionItem> {
    let m = series.channel_count();
    (0..candidates.len() * m)
        .into_par_iter()
        .map(|k| {
            let (candidate, channel) = (k / m, k % m);
            ReconstructionItem {
                candidate,
                channel,
                result: reconstruct(series, &candidates[candidate], grid, channel, window),
            }
        })
        .collect()
}

/// [`reconstruct_candidates`] over a counterfactual set, for the observation
/// window starting at `window_start`.
pub fn reconstruct_all(
    series: &FluxSeries,
    set: &CounterfactualSet,
    grid: &WindowGrid,
    window_start: usize,
) -> Vec<ReconstructionItem> {
    let candidates: Vec<FeatureVector> = (0..set.candidates.len()).map(|k| set.candidate_vector(k)).collect();
    reconstruct_candidates(series, &candidates, grid, (window_start, window_start + grid.extent()))
}

/// Long-format CSV: `timestamp,channel,variant,candidate_id,value`.
/// Missing samples are written with an empty value.
pub fn write_long_csv<W: Write>(writer: W, results: &[(usize, &ReconstructionResult)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["timestamp", "channel", "variant", "candidate_id", "value"])?;
    for (candidate, r) in results {
        let id = candidate.to_string();
        for (variant, arr) in [
            ("original", &r.original),
            ("offset", &r.offsets),
            ("perturbed", &r.perturbed),
        ] {
            for (i, v) in arr.iter().enumerate() {
                let ts = r.timestamp(i).to_rfc3339_opts(SecondsFormat::Secs, true);
                let value = if r.missing[i] && variant != "offset" {
                    String::new()
                } else {
                    format!("{v}")
                };
                out.write_record([ts.as_str(), r.channel.as_str(), variant, id.as_str(), value.as_str()])?;
            }
        }
    }
    out.flush().map_err(|e| PgceError::io("<csv output>", e))?;
    Ok(())
}
