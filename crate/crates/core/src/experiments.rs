//! Training, benchmark and grid-search drivers shared by the CLI and tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::forest::{self, cross_validate, CvReport, ForestModel, Hyperparams};
use crate::genetic::{evolve, CounterfactualSet, GaConfig, ObjectiveWeights};
use crate::ingest::{build_dataset, Dataset, DatasetOptions, EventCatalog};
use crate::metrics::{
    benchmark_compare, diversity_mean, dtw_by_channel, skill_scores, sparsity, ConfusionCounts, InstanceMetrics,
    MeanStd, MetricsReport, SkillScores,
};
use crate::physics::{fit_spec, FitOptions, PhysicsSpec};
use crate::rng;
use crate::series::{FeatureVector, FluxSeries};

/// Bound padding used by the training pipeline, so unseen instances slightly
/// beyond the training range are not forced to change.
pub const DEFAULT_RANGE_PADDING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DatasetOptions,
    pub grid: Vec<Hyperparams>,
    pub folds: usize,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetOptions::default(),
            grid: forest::default_grid(),
            folds: 5,
            fit: FitOptions {
                range_padding: DEFAULT_RANGE_PADDING,
                ..FitOptions::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub cv: CvReport,
    pub held_out_confusion: ConfusionCounts,
    pub held_out: SkillScores,
    pub train_instances: usize,
    pub test_instances: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dataset: Dataset,
    pub model: ForestModel,
    pub spec: PhysicsSpec,
    pub report: SkillReport,
}

/// Builds the dataset, cross-validates the grid on the training split, refits
/// the best point on the whole training split and scores the held-out split.
/// The physics spec is fitted on the training split only.
pub fn train_pipeline(series: &FluxSeries, catalog: &EventCatalog, config: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = build_dataset(series, catalog, &config.dataset)?;
    let train_set = dataset.train_set();
    let test_set = dataset.test_set();
    let cv = cross_validate(&train_set, config.folds, &config.grid, config.seed)?;
    let model = forest::train(&train_set, cv.best, rng::derive_seed(config.seed, u64::MAX))?;
    let spec = fit_spec(&train_set, &dataset.layout, config.fit)?;
    let held_out_confusion = if test_set.is_empty() {
        ConfusionCounts::default()
    } else {
        model.evaluate(&test_set)?
    };
    let report = SkillReport {
        cv,
        held_out: skill_scores(&held_out_confusion),
        held_out_confusion,
        train_instances: train_set.len(),
        test_instances: test_set.len(),
    };
    Ok(TrainOutcome {
        dataset,
        model,
        spec,
        report,
    })
}

/// Per-candidate-set summary. Distances use the spec's min-max normalization.
/// Only valid candidates count; `None` when there are none.
pub fn instance_metrics(
    instance: usize,
    set: &CounterfactualSet,
    spec: &PhysicsSpec,
    eps: f64,
) -> Result<Option<InstanceMetrics>> {
    let valid: Vec<&Vec<f64>> = set.candidates.iter().filter(|c| c.valid).map(|c| &c.values).collect();
    if valid.is_empty() {
        return Ok(None);
    }
    let q = spec.normalize_all(&set.query.values);
    let norm: Vec<Vec<f64>> = valid.iter().map(|v| spec.normalize_all(v)).collect();
    let n = valid.len() as f64;
    let mut dtw = 0.0;
    let mut unchanged = 0.0;
    let mut changed = 0.0;
    let mut ordering = 0.0;
    let mut range = 0.0;
    for (raw, v) in valid.iter().zip(&norm) {
        dtw += dtw_by_channel(&q, v, spec.layout())?;
        let s = sparsity(&q, v, eps)?;
        unchanged += s.unchanged_fraction;
        changed += s.changed as f64;
        ordering += spec.ordering_violations(raw)? as f64;
        range += spec.range_violations(raw)? as f64;
    }
    let diversity = if norm.len() > 1 {
        diversity_mean(&norm, set.provenance.config.diversity_norm)?
    } else {
        0.0
    };
    Ok(Some(InstanceMetrics {
        instance,
        dtw: dtw / n,
        sparsity_fraction: unchanged / n,
        changed_features: changed / n,
        diversity,
        ordering_violations: ordering / n,
        range_violations: range / n,
        valid_fraction: n / set.candidates.len() as f64,
        runtime_seconds: set.provenance.runtime_seconds,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Number of test instances to explain.
    pub instances: usize,
    pub ga: GaConfig,
    pub weights: ObjectiveWeights,
    pub baseline_weights: ObjectiveWeights,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            instances: 20,
            ga: GaConfig::default(),
            weights: ObjectiveWeights::default(),
            baseline_weights: ObjectiveWeights::baseline(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFailure {
    pub instance: usize,
    pub method: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    /// Dataset indices of the explained instances.
    pub instances: Vec<usize>,
    pub constrained_sets: Vec<CounterfactualSet>,
    pub baseline_sets: Vec<CounterfactualSet>,
    pub constrained: Vec<InstanceMetrics>,
    pub baseline: Vec<InstanceMetrics>,
    pub failures: Vec<BenchmarkFailure>,
    pub report: MetricsReport,
}

pub const CONSTRAINED_METHOD: &str = "constrained";
pub const BASELINE_METHOD: &str = "baseline";

/// Seeded, class-balanced choice of up to `n` instances from `pool`, in
/// ascending index order.
pub fn sample_instances(dataset: &Dataset, pool: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut by_class: [Vec<usize>; 2] = [vec![], vec![]];
    for &i in pool {
        let class = dataset.instances[i].label.map(|l| l.class_index()).unwrap_or(0);
        by_class[class as usize].push(i);
    }
    let mut r = rng::stream(seed, 0xbe7c);
    for side in &mut by_class {
        rand::seq::SliceRandom::shuffle(side.as_mut_slice(), &mut r);
    }
    let mut chosen = Vec::with_capacity(n);
    let mut k = 0;
    while chosen.len() < n && (k < by_class[0].len() || k < by_class[1].len()) {
        for side in &by_class {
            if chosen.len() < n && k < side.len() {
                chosen.push(side[k]);
            }
        }
        k += 1;
    }
    chosen.sort_unstable();
    chosen
}

/// Explains each instance in both modes with identical seeds and GA budget.
/// An instance where either method yields no valid candidate is excluded
/// from both aggregates and listed in `failures`.
pub fn run_benchmark(
    instances: &[FeatureVector],
    ids: &[usize],
    model: &ForestModel,
    spec: &PhysicsSpec,
    config: &BenchmarkConfig,
) -> Result<BenchmarkOutcome> {
    if instances.len() != ids.len() {
        return Err(PgceError::dims(ids.len(), instances.len()));
    }
    let runs: Vec<Result<(CounterfactualSet, CounterfactualSet)>> = instances
        .par_iter()
        .zip(ids)
        .map(|(x, &id)| {
            let ga = GaConfig {
                seed: rng::derive_seed(config.seed, id as u64),
                ..config.ga
            };
            let constrained = evolve(
                x,
                model,
                spec,
                &config.weights,
                &GaConfig {
                    constrained: true,
                    ..ga
                },
            )?;
            let baseline = evolve(x, model, spec, &config.baseline_weights, &ga.baseline())?;
            Ok((constrained, baseline))
        })
        .collect();
    let mut outcome = BenchmarkOutcome {
        instances: ids.to_vec(),
        constrained_sets: vec![],
        baseline_sets: vec![],
        constrained: vec![],
        baseline: vec![],
        failures: vec![],
        report: MetricsReport {
            methods: vec![],
            radar: vec![],
        },
    };
    for (run, &id) in runs.into_iter().zip(ids) {
        let (c_set, b_set) = run?;
        let eps = config.ga.sparsity_eps;
        let c = instance_metrics(id, &c_set, spec, eps)?;
        let b = instance_metrics(id, &b_set, spec, eps)?;
        match (c, b) {
            (Some(c), Some(b)) => {
                outcome.constrained.push(c);
                outcome.baseline.push(b);
            }
            (c, b) => {
                for (method, m) in [(CONSTRAINED_METHOD, c.is_none()), (BASELINE_METHOD, b.is_none())] {
                    if m {
                        outcome.failures.push(BenchmarkFailure {
                            instance: id,
                            method: method.into(),
                            reason: PgceError::NoValidCandidate.to_string(),
                        });
                    }
                }
            }
        }
        outcome.constrained_sets.push(c_set);
        outcome.baseline_sets.push(b_set);
    }
    outcome.report = benchmark_compare(
        (CONSTRAINED_METHOD, &outcome.constrained),
        (BASELINE_METHOD, &outcome.baseline),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridAxes {
    pub proximity_weight: Vec<f64>,
    pub sparsity_weight: Vec<f64>,
    pub diversity_weight: Vec<f64>,
    pub ordering_penalty_weight: Vec<f64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes {
            proximity_weight: vec![1.0, 10.0],
            sparsity_weight: vec![0.1, 1.0],
            diversity_weight: vec![1.0],
            ordering_penalty_weight: vec![0.0, 1.0, 10.0],
        }
    }
}

impl GridAxes {
    pub fn points(&self, base: &ObjectiveWeights) -> Vec<ObjectiveWeights> {
        let mut out = Vec::new();
        for &p in &self.proximity_weight {
            for &s in &self.sparsity_weight {
                for &d in &self.diversity_weight {
                    for &o in &self.ordering_penalty_weight {
                        out.push(ObjectiveWeights {
                            proximity_weight: p,
                            sparsity_weight: s,
                            diversity_weight: d,
                            ordering_penalty_weight: o,
                            ..*base
                        });
                    }
                }
            }
        }
        out
    }
}

/// Weights of the objective used to rank grid points (lower is better):
/// `proximity * dtw - sparsity * unchanged - diversity * diversity + invalid * (1 - valid)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionObjective {
    pub proximity: f64,
    pub sparsity: f64,
    pub diversity: f64,
    pub invalid: f64,
}

impl Default for SelectionObjective {
    fn default() -> Self {
        SelectionObjective {
            proximity: 1.0,
            sparsity: 1.0,
            diversity: 0.5,
            invalid: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSearchConfig {
    pub axes: GridAxes,
    pub base_weights: ObjectiveWeights,
    pub ga: GaConfig,
    /// Independent GA seeds per grid point.
    pub seeds: usize,
    /// Test instances explained per seed.
    pub instances: usize,
    pub objective: SelectionObjective,
    pub seed: u64,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        GridSearchConfig {
            axes: GridAxes::default(),
            base_weights: ObjectiveWeights::default(),
            // Penalties alone steer the search so their effect is observable;
            // returned candidates are still repaired.
            ga: GaConfig {
                repair_during_search: false,
                generations: 60,
                population_size: 60,
                ..GaConfig::default()
            },
            seeds: 20,
            instances: 4,
            objective: SelectionObjective::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointSummary {
    pub index: usize,
    pub weights: ObjectiveWeights,
    pub runs: usize,
    pub valid_fraction: f64,
    pub proximity_dtw: MeanStd,
    pub sparsity: MeanStd,
    pub diversity: MeanStd,
    /// Mean ordering violations of final populations before output repair.
    pub pre_repair_ordering: MeanStd,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub points: Vec<GridPointSummary>,
    pub best_index: Option<usize>,
}

impl GridSearchReport {
    /// Tidy rows: `(index, weights, metric, value)`.
    pub fn tidy_rows(&self) -> Vec<(usize, ObjectiveWeights, &'static str, f64)> {
        let mut rows = Vec::new();
        for p in &self.points {
            for (metric, value) in [
                ("proximity_dtw", p.proximity_dtw.mean),
                ("sparsity", p.sparsity.mean),
                ("diversity", p.diversity.mean),
                ("pre_repair_ordering", p.pre_repair_ordering.mean),
                ("valid_fraction", p.valid_fraction),
                ("objective", p.objective),
            ] {
                rows.push((p.index, p.weights, metric, value));
            }
        }
        rows
    }
}

/// Runs every grid point against `instances` over `config.seeds` GA seeds.
/// Seeds depend only on (seed index, instance), so every grid point sees the
/// same seeds.
pub fn run_gridsearch(
    instances: &[FeatureVector],
    model: &ForestModel,
    spec: &PhysicsSpec,
    config: &GridSearchConfig,
) -> Result<GridSearchReport> {
    if instances.is_empty() || config.seeds == 0 {
        return Err(PgceError::InvalidConfig("grid search needs instances and seeds".into()));
    }
    let points = config.axes.points(&config.base_weights);
    if points.is_empty() {
        return Err(PgceError::InvalidConfig("empty grid".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..points.len())
        .flat_map(|g| (0..config.seeds).flat_map(move |s| (0..instances.len()).map(move |i| (g, s, i))))
        .collect();
    let results: Vec<Result<(Option<InstanceMetrics>, f64)>> = jobs
        .par_iter()
        .map(|&(g, s, i)| {
            let ga = GaConfig {
                seed: rng::derive_seed(config.seed, (s * instances.len() + i) as u64),
                ..config.ga
            };
            let set = evolve(&instances[i], model, spec, &points[g], &ga)?;
            let m = instance_metrics(i, &set, spec, ga.sparsity_eps)?;
            Ok((m, set.provenance.final_population_ordering_mean))
        })
        .collect();

    let per_point = config.seeds * instances.len();
    let mut summaries = Vec::with_capacity(points.len());
    for (g, weights) in points.iter().enumerate() {
        let mut metrics = Vec::new();
        let mut ordering = Vec::new();
        for r in &results[g * per_point..(g + 1) * per_point] {
            let (m, o) = match r {
                Ok(v) => v,
                Err(e) => return Err(PgceError::InvalidConfig(format!("grid point {g}: {e}"))),
            };
            ordering.push(*o);
            if let Some(m) = m {
                metrics.push(m.clone());
            }
        }
        let valid_fraction = metrics.len() as f64 / per_point as f64;
        let dtw = MeanStd::of(metrics.iter().map(|m| m.dtw));
        let sp = MeanStd::of(metrics.iter().map(|m| m.sparsity_fraction));
        let dv = MeanStd::of(metrics.iter().map(|m| m.diversity));
        let o = &config.objective;
        let objective = if metrics.is_empty() {
            f64::INFINITY
        } else {
            o.proximity * dtw.mean - o.sparsity * sp.mean - o.diversity * dv.mean + o.invalid * (1.0 - valid_fraction)
        };
        summaries.push(GridPointSummary {
            index: g,
            weights: *weights,
            runs: per_point,
            valid_fraction,
            proximity_dtw: dtw,
            sparsity: sp,
            diversity: dv,
            pre_repair_ordering: MeanStd::of(ordering),
            objective,
        });
    }
    let best_index = summaries
        .iter()
        .filter(|p| p.objective.is_finite())
        .min_by(|a, b| a.objective.total_cmp(&b.objective).then(a.index.cmp(&b.index)))
        .map(|p| p.index);
    Ok(GridSearchReport {
        points: summaries,
        best_index,
    })
}
