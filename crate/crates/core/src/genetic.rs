//! Constrained genetic counterfactual search.
//!
//! Candidates are scored by normalized L1 proximity, a hinge on the target
//! class probability, ordering/range penalties and a changed-feature fraction.
//! Ranking puts candidates that already reach the target class ahead of those
//! that do not; invalid ones are ordered by hinge loss, valid ones by score.
//! Diversity is applied when picking the final `n` candidates from the
//! archive of distinct valid individuals seen during the search.
//!
//! In constrained mode every individual is clamped into the spec bounds and
//! ordering-repaired after initialization and mutation. Returned candidates
//! are always repaired in constrained mode.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::forest::ForestModel;
use crate::metrics::{distance, DiversityNorm, DEFAULT_SPARSITY_EPS};
use crate::physics::{rolling_mean_smooth, PhysicsSpec, DEFAULT_SMOOTHING_WINDOW};
use crate::rng;
use crate::series::FeatureVector;

pub const CFE_FORMAT: &str = "pgce-counterfactual-set";
pub const CFE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub proximity_weight: f64,
    pub sparsity_weight: f64,
    pub diversity_weight: f64,
    pub ordering_penalty_weight: f64,
    pub range_penalty_weight: f64,
    pub validity_weight: f64,
    /// Optional temporal-consistency penalty; 0 leaves smoothness to the
    /// post-search smoothing step.
    pub smoothness_penalty_weight: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            proximity_weight: 10.0,
            sparsity_weight: 0.1,
            diversity_weight: 1.0,
            ordering_penalty_weight: 10.0,
            range_penalty_weight: 10.0,
            validity_weight: 100.0,
            smoothness_penalty_weight: 0.0,
        }
    }
}

impl ObjectiveWeights {
    /// Weights of the stock genetic explainer used as the unconstrained comparator.
    pub fn baseline() -> Self {
        ObjectiveWeights {
            proximity_weight: 0.2,
            sparsity_weight: 0.2,
            diversity_weight: 5.0,
            ordering_penalty_weight: 0.0,
            range_penalty_weight: 0.0,
            validity_weight: 100.0,
            smoothness_penalty_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.proximity_weight,
            self.sparsity_weight,
            self.diversity_weight,
            self.ordering_penalty_weight,
            self.range_penalty_weight,
            self.validity_weight,
            self.smoothness_penalty_weight,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PgceError::InvalidConfig(
                "objective weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub blend_alpha: f64,
    /// Probability that an offspring is mutated.
    pub mutation_rate: f64,
    /// Gaussian mutation width as a fraction of each feature's training range.
    pub mutation_scale: f64,
    /// Largest number of features touched by one mutation.
    pub mutation_max_features: usize,
    /// Largest number of features resampled in a perturbed copy of the query
    /// at initialization; `None` means half the dimension.
    pub init_max_features: Option<usize>,
    /// Sample features whose bounds are strictly positive log-uniformly
    /// (flux levels span orders of magnitude); others uniformly.
    pub log_sampling: bool,
    pub elitism_count: usize,
    pub n_counterfactuals: usize,
    /// Explicit target class; `None` targets the opposite of the model's label.
    pub target_class: Option<u8>,
    pub seed: u64,
    pub constrained: bool,
    /// Repair individuals during the search, not only the returned ones.
    pub repair_during_search: bool,
    pub smoothing_window: usize,
    /// Revert changed features to the query value while the candidate stays valid.
    pub posthoc_sparsity: bool,
    /// Bisection steps toward the query for features that cannot be fully
    /// reverted; 0 disables.
    pub posthoc_steps: usize,
    pub sparsity_eps: f64,
    pub diversity_norm: DiversityNorm,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 120,
            generations: 150,
            tournament_size: 3,
            blend_alpha: 1.0,
            mutation_rate: 0.2,
            mutation_scale: 0.1,
            mutation_max_features: 3,
            init_max_features: None,
            log_sampling: true,
            elitism_count: 2,
            n_counterfactuals: 3,
            target_class: None,
            seed: 0,
            constrained: true,
            repair_during_search: true,
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
            posthoc_sparsity: true,
            posthoc_steps: 12,
            sparsity_eps: DEFAULT_SPARSITY_EPS,
            diversity_norm: DiversityNorm::L1,
        }
    }
}

impl GaConfig {
    /// Same search mechanics with physics handling switched off.
    pub fn baseline(&self) -> GaConfig {
        GaConfig {
            constrained: false,
            smoothing_window: 1,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PgceError::InvalidConfig(m.into()));
        if self.n_counterfactuals == 0 || self.population_size < self.n_counterfactuals {
            return fail("need population_size >= n_counterfactuals >= 1");
        }
        if self.tournament_size < 2 {
            return fail("tournament_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return fail("mutation_rate must lie in [0, 1]");
        }
        if !(self.blend_alpha > 0.0 && self.blend_alpha <= 1.0) {
            return fail("blend_alpha must lie in (0, 1]");
        }
        if self.mutation_scale.is_nan() || self.mutation_scale < 0.0 || self.mutation_max_features == 0 {
            return fail("mutation_scale must be >= 0 and mutation_max_features >= 1");
        }
        if self.elitism_count >= self.population_size {
            return fail("elitism_count must be smaller than population_size");
        }
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return fail("smoothing_window must be odd and positive");
        }
        if self.target_class.is_some_and(|t| t > 1) {
            return fail("target_class must be 0 or 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitnessBreakdown {
    pub score: f64,
    pub proximity: f64,
    pub validity_loss: f64,
    pub ordering: f64,
    pub range: f64,
    pub sparsity: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Evaluation {
    fitness: FitnessBreakdown,
    label: u8,
    target_probability: f64,
}

impl Evaluation {
    fn valid(&self, target: u8) -> bool {
        self.label == target
    }
}

/// Scores `candidate` against `query`. Proximity and the changed-feature
/// fraction use the spec's min-max normalization.
pub fn fitness(
    candidate: &[f64],
    query: &[f64],
    target_class: u8,
    model: &ForestModel,
    spec: &PhysicsSpec,
    weights: &ObjectiveWeights,
    sparsity_eps: f64,
) -> Result<FitnessBreakdown> {
    Ok(evaluate(candidate, query, target_class, model, spec, weights, sparsity_eps)?.fitness)
}

fn evaluate(
    candidate: &[f64],
    query: &[f64],
    target: u8,
    model: &ForestModel,
    spec: &PhysicsSpec,
    weights: &ObjectiveWeights,
    eps: f64,
) -> Result<Evaluation> {
    if candidate.len() != query.len() {
        return Err(PgceError::dims(query.len(), candidate.len()));
    }
    let proba = model.predict_proba(candidate)?;
    let label = model.predict(candidate)?;
    let mut proximity = 0.0;
    let mut changed = 0usize;
    for (i, (c, q)) in candidate.iter().zip(query).enumerate() {
        let delta = (c - q).abs() / spec.scale_span(i);
        proximity += delta;
        if delta > eps {
            changed += 1;
        }
    }
    let p_target = proba[target as usize];
    let validity_loss = (0.5 - p_target).max(0.0);
    let ordering = spec.ordering_score(candidate)?;
    let range = spec.range_score(candidate)?;
    let smoothness = if weights.smoothness_penalty_weight > 0.0 {
        spec.smoothness_score(candidate)?
    } else {
        0.0
    };
    let sparsity = changed as f64 / candidate.len().max(1) as f64;
    let score = weights.proximity_weight * proximity
        + weights.validity_weight * validity_loss
        + weights.ordering_penalty_weight * ordering
        + weights.range_penalty_weight * range
        + weights.sparsity_weight * sparsity
        + weights.smoothness_penalty_weight * smoothness;
    Ok(Evaluation {
        fitness: FitnessBreakdown {
            score,
            proximity,
            validity_loss,
            ordering,
            range,
            sparsity,
            smoothness,
        },
        label,
        target_probability: p_target,
    })
}

/// Clamps into bounds, then enforces ordering with one descending pass per
/// window group (a value above its predecessor is lowered to it).
pub fn repair(values: &[f64], spec: &PhysicsSpec) -> Result<Vec<f64>> {
    if values.len() != spec.dim() {
        return Err(PgceError::dims(spec.dim(), values.len()));
    }
    let mut out: Vec<f64> = values
        .iter()
        .zip(spec.range_bounds())
        .map(|(v, b)| b.clamp(*v))
        .collect();
    for group in spec.ordering_groups() {
        for p in 1..group.len() {
            if out[group[p - 1]] < out[group[p]] {
                out[group[p]] = out[group[p - 1]];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub values: Vec<f64>,
    pub predicted_label: u8,
    pub target_probability: f64,
    pub fitness: FitnessBreakdown,
    pub valid: bool,
    #[serde(default)]
    pub smoothing_reverted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub weights: ObjectiveWeights,
    pub config: GaConfig,
    pub seed: u64,
    pub generations_run: usize,
    /// Best score per generation (index 0 is the initial population).
    pub best_score_history: Vec<f64>,
    /// Whether the best individual reached the target class, per generation.
    pub best_valid_history: Vec<bool>,
    pub best_validity_loss_history: Vec<f64>,
    /// Mean ordering violations over the last population, before output repair.
    pub final_population_ordering_mean: f64,
    pub final_population_range_mean: f64,
    /// Wall-clock time; excluded from determinism comparisons.
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    pub format: String,
    pub version: u32,
    pub query: FeatureVector,
    pub query_label: u8,
    pub target_class: u8,
    pub candidates: Vec<Candidate>,
    pub provenance: Provenance,
}

impl CounterfactualSet {
    pub fn any_valid(&self) -> bool {
        self.candidates.iter().any(|c| c.valid)
    }

    /// `Err(NoValidCandidate)` unless at least one candidate is valid.
    pub fn require_valid(&self) -> Result<()> {
        if self.any_valid() {
            Ok(())
        } else {
            Err(PgceError::NoValidCandidate)
        }
    }

    pub fn candidate_vector(&self, k: usize) -> FeatureVector {
        self.query.with_values(self.candidates[k].values.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: CounterfactualSet = serde_json::from_str(text)?;
        if set.format != CFE_FORMAT {
            return Err(PgceError::InvalidConfig(format!("unknown set format {}", set.format)));
        }
        if set.version != CFE_VERSION {
            return Err(PgceError::UnsupportedVersion {
                kind: "counterfactual set",
                found: set.version,
                expected: CFE_VERSION,
            });
        }
        let d = set.query.dim();
        if let Some(bad) = set.candidates.iter().find(|c| c.values.len() != d) {
            return Err(PgceError::dims(d, bad.values.len()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| PgceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgceError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Everything one search needs, shared read-only across workers.
struct Problem<'a> {
    query: &'a [f64],
    target: u8,
    model: &'a ForestModel,
    spec: &'a PhysicsSpec,
    weights: &'a ObjectiveWeights,
    config: &'a GaConfig,
}

impl Problem<'_> {
    fn eval(&self, values: &[f64]) -> Result<Evaluation> {
        evaluate(
            values,
            self.query,
            self.target,
            self.model,
            self.spec,
            self.weights,
            self.config.sparsity_eps,
        )
    }

    fn eval_all(&self, pop: &[Vec<f64>]) -> Result<Vec<Evaluation>> {
        pop.par_iter().map(|v| self.eval(v)).collect()
    }

    /// Valid before invalid; invalid ones by hinge loss first; then score.
    fn rank(&self, a: &Evaluation, b: &Evaluation) -> Ordering {
        let (va, vb) = (a.valid(self.target), b.valid(self.target));
        vb.cmp(&va)
            .then_with(|| {
                if va {
                    Ordering::Equal
                } else {
                    a.fitness.validity_loss.total_cmp(&b.fitness.validity_loss)
                }
            })
            .then(a.fitness.score.total_cmp(&b.fitness.score))
    }

    fn repair_search(&self) -> bool {
        self.config.constrained && self.config.repair_during_search
    }

    fn feasible(&self, values: &[f64]) -> bool {
        self.spec.ordering_violations(values).is_ok_and(|v| v == 0)
            && self.spec.range_violations(values).is_ok_and(|v| v == 0)
    }

    /// Valid (and feasible in constrained mode) under the model.
    fn acceptable(&self, values: &[f64]) -> Result<bool> {
        let ok = self.model.predict(values)? == self.target;
        Ok(ok && (!self.config.constrained || self.feasible(values)))
    }

    fn uniform_in_bounds(&self, rng: &mut ChaCha8Rng, i: usize) -> f64 {
        let b = self.spec.range_bounds()[i];
        if b.span().is_nan() || b.span() <= 0.0 {
            b.min
        } else if self.config.log_sampling && b.min > 0.0 {
            rng.random_range(b.min.ln()..=b.max.ln()).exp().clamp(b.min, b.max)
        } else {
            rng.random_range(b.min..=b.max)
        }
    }

    fn initial_population(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let d = self.query.len();
        let size = self.config.population_size;
        let mut pop = Vec::with_capacity(size);
        for k in 0..size {
            let mut v = self.query.to_vec();
            if k < size / 2 {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = self.uniform_in_bounds(rng, i);
                }
            } else {
                let most = self.config.init_max_features.unwrap_or(d / 2).clamp(1, d);
                let count = rng.random_range(1..=most);
                for i in sample(rng, d, count).iter() {
                    v[i] = self.uniform_in_bounds(rng, i);
                }
            }
            if self.repair_search() {
                v = repair(&v, self.spec)?;
            }
            pop.push(v);
        }
        Ok(pop)
    }

    fn tournament(&self, rng: &mut ChaCha8Rng, evals: &[Evaluation]) -> usize {
        let mut best = rng.random_range(0..evals.len());
        for _ in 1..self.config.tournament_size {
            let c = rng.random_range(0..evals.len());
            if self.rank(&evals[c], &evals[best]) == Ordering::Less {
                best = c;
            }
        }
        best
    }

    fn offspring(&self, rng: &mut ChaCha8Rng, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let d = a.len();
        let mut child: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let alpha = rng.random_range(0.0..=self.config.blend_alpha);
                alpha * x + (1.0 - alpha) * y
            })
            .collect();
        if rng.random_bool(self.config.mutation_rate) {
            let count = rng.random_range(1..=self.config.mutation_max_features.min(d));
            for i in sample(rng, d, count).iter() {
                let sigma = self.config.mutation_scale * self.spec.scale_span(i);
                if sigma > 0.0 {
                    let noise = Normal::new(0.0, sigma).expect("positive sigma");
                    child[i] += noise.sample(rng);
                }
            }
        }
        if self.repair_search() {
            child = repair(&child, self.spec)?;
        }
        Ok(child)
    }

    /// Greedy pick of up to `n` candidates: best first, then the one minimizing
    /// `score - diversity_weight * mean distance to those already picked`.
    fn select(&self, pool: &[(Vec<f64>, Evaluation)]) -> Vec<usize> {
        let n = self.config.n_counterfactuals;
        let norm: Vec<Vec<f64>> = pool.iter().map(|(v, _)| self.spec.normalize_all(v)).collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&i, &j| self.rank(&pool[i].1, &pool[j].1));
        let mut picked: Vec<usize> = Vec::with_capacity(n);
        for tier_valid in [true, false] {
            let tier: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| pool[i].1.valid(self.target) == tier_valid)
                .collect();
            let mut remaining = tier;
            while picked.len() < n && !remaining.is_empty() {
                let pos = if picked.is_empty() {
                    0
                } else {
                    let objective = |i: usize| {
                        let mean = picked
                            .iter()
                            .map(|&p| distance(&norm[i], &norm[p], self.config.diversity_norm))
                            .sum::<f64>()
                            / picked.len() as f64;
                        pool[i].1.fitness.score - self.weights.diversity_weight * mean
                    };
                    let mut best = 0;
                    let mut best_obj = objective(remaining[0]);
                    for (k, &i) in remaining.iter().enumerate().skip(1) {
                        let o = objective(i);
                        if o < best_obj {
                            best = k;
                            best_obj = o;
                        }
                    }
                    best
                };
                picked.push(remaining.remove(pos));
            }
        }
        picked
    }

    /// Smooths the perturbation relative to the query, re-repairs, and keeps
    /// the result only if it is still acceptable.
    fn smooth(&self, values: &[f64]) -> Result<(Vec<f64>, bool)> {
        let window = self.config.smoothing_window;
        if window <= 1 {
            return Ok((values.to_vec(), false));
        }
        let delta: Vec<f64> = values.iter().zip(self.query).map(|(v, q)| v - q).collect();
        let smoothed = rolling_mean_smooth(&delta, self.spec.layout(), window)?;
        let mut out: Vec<f64> = self.query.iter().zip(&smoothed).map(|(q, s)| q + s).collect();
        if self.config.constrained {
            out = repair(&out, self.spec)?;
        }
        if self.acceptable(&out)? || !self.acceptable(values)? {
            Ok((out, false))
        } else {
            Ok((values.to_vec(), true))
        }
    }

    /// Weighted set objective: summed scores minus the diversity reward.
    fn set_objective(&self, set: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for v in set {
            total += self.eval(v)?.fitness.score;
        }
        let norm: Vec<Vec<f64>> = set.iter().map(|v| self.spec.normalize_all(v)).collect();
        let mut pairs = 0usize;
        let mut spread = 0.0;
        for i in 0..norm.len() {
            for j in i + 1..norm.len() {
                spread += distance(&norm[i], &norm[j], self.config.diversity_norm);
                pairs += 1;
            }
        }
        if pairs > 0 {
            total -= self.weights.diversity_weight * spread / pairs as f64;
        }
        Ok(total)
    }

    /// Moves changed features of each candidate back toward the query,
    /// smallest normalized change first. A move is kept when the candidate
    /// stays acceptable and the set objective does not get worse. When a full
    /// revert is rejected, bisects along the segment toward the query.
    fn sparsify(&self, mut set: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        if !self.config.posthoc_sparsity {
            return Ok(set);
        }
        for k in 0..set.len() {
            if !self.acceptable(&set[k])? {
                continue;
            }
            let mut changed: Vec<(f64, usize)> = set[k]
                .iter()
                .zip(self.query)
                .enumerate()
                .map(|(i, (v, q))| ((v - q).abs() / self.spec.scale_span(i), i))
                .filter(|(delta, _)| *delta > self.config.sparsity_eps)
                .collect();
            changed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut current = self.set_objective(&set)?;
            for (_, i) in changed {
                let keep = set[k][i];
                let try_value = |set: &mut Vec<Vec<f64>>, value: f64, current: &mut f64| -> Result<bool> {
                    let before = set[k][i];
                    set[k][i] = value;
                    if self.acceptable(&set[k])? {
                        let obj = self.set_objective(set)?;
                        if obj <= *current {
                            *current = obj;
                            return Ok(true);
                        }
                    }
                    set[k][i] = before;
                    Ok(false)
                };
                if try_value(&mut set, self.query[i], &mut current)? {
                    continue;
                }
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..self.config.posthoc_steps {
                    let mid = 0.5 * (lo + hi);
                    if try_value(&mut set, keep + mid * (self.query[i] - keep), &mut current)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
        }
        Ok(set)
    }
}

/// Runs the constrained genetic search for `query`.
///
/// If the model already assigns the target class to `query`, the query itself
/// is returned as a zero-cost valid counterfactual. When no individual reaches
/// the target class the set is still returned, with every candidate flagged
/// invalid; see [`CounterfactualSet::require_valid`].
pub fn evolve(
    query: &FeatureVector,
    model: &ForestModel,
    spec: &PhysicsSpec,
    weights: &ObjectiveWeights,
    config: &GaConfig,
) -> Result<CounterfactualSet> {
    let started = Instant::now();
    weights.validate()?;
    config.validate()?;
    let d = query.dim();
    if spec.dim() != d {
        return Err(PgceError::dims(spec.dim(), d));
    }
    if model.n_features != d {
        return Err(PgceError::dims(model.n_features, d));
    }
    let query_label = model.predict(&query.values)?;
    let target = config.target_class.unwrap_or(1 - query_label);
    let problem = Problem {
        query: &query.values,
        target,
        model,
        spec,
        weights,
        config,
    };

    let mut provenance = Provenance {
        weights: *weights,
        config: *config,
        seed: config.seed,
        generations_run: 0,
        best_score_history: vec![],
        best_valid_history: vec![],
        best_validity_loss_history: vec![],
        final_population_ordering_mean: 0.0,
        final_population_range_mean: 0.0,
        runtime_seconds: 0.0,
    };

    if query_label == target {
        let eval = problem.eval(&query.values)?;
        provenance.runtime_seconds = started.elapsed().as_secs_f64();
        return Ok(CounterfactualSet {
            format: CFE_FORMAT.into(),
            version: CFE_VERSION,
            query: query.clone(),
            query_label,
            target_class: target,
            candidates: vec![Candidate {
                values: query.values.clone(),
                predicted_label: eval.label,
                target_probability: eval.target_probability,
                fitness: eval.fitness,
                valid: true,
                smoothing_reverted: false,
            }],
            provenance,
        });
    }

    let mut rng = rng::seeded(config.seed);
    let mut pop = problem.initial_population(&mut rng)?;
    let mut evals = problem.eval_all(&pop)?;
    let record = |evals: &[Evaluation], prov: &mut Provenance| {
        let best = evals
            .iter()
            .min_by(|a, b| problem.rank(a, b))
            .expect("non-empty population");
        prov.best_score_history.push(best.fitness.score);
        prov.best_valid_history.push(best.valid(target));
        prov.best_validity_loss_history.push(best.fitness.validity_loss);
    };
    record(&evals, &mut provenance);

    // Every distinct valid individual seen, in discovery order; the final
    // selection draws from it. Constrained outputs are repaired first.
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut archive: Vec<(Vec<f64>, Evaluation)> = Vec::new();
    let mut admit = |v: &[f64], e: &Evaluation, force: bool| -> Result<()> {
        let (v, e) = if config.constrained && !config.repair_during_search && (e.valid(target) || force) {
            let r = repair(v, spec)?;
            let e = problem.eval(&r)?;
            (r, e)
        } else {
            (v.to_vec(), *e)
        };
        if (e.valid(target) || force) && seen.insert(v.iter().map(|x| x.to_bits()).collect()) {
            archive.push((v, e));
        }
        Ok(())
    };
    for (v, e) in pop.iter().zip(&evals) {
        admit(v, e, false)?;
    }

    for _ in 0..config.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&i, &j| problem.rank(&evals[i], &evals[j]));
        let mut next: Vec<Vec<f64>> = order[..config.elitism_count].iter().map(|&i| pop[i].clone()).collect();
        let mut next_evals: Vec<Evaluation> = order[..config.elitism_count].iter().map(|&i| evals[i]).collect();
        let mut children = Vec::with_capacity(config.population_size - next.len());
        while next.len() + children.len() < config.population_size {
            let a = problem.tournament(&mut rng, &evals);
            let b = problem.tournament(&mut rng, &evals);
            children.push(problem.offspring(&mut rng, &pop[a], &pop[b])?);
        }
        let child_evals = problem.eval_all(&children)?;
        for (v, e) in children.iter().zip(&child_evals) {
            admit(v, e, false)?;
        }
        next_evals.extend(child_evals);
        next.extend(children);
        pop = next;
        evals = next_evals;
        record(&evals, &mut provenance);
        provenance.generations_run += 1;
    }

    let n_pop = pop.len() as f64;
    provenance.final_population_ordering_mean = evals.iter().map(|e| e.fitness.ordering).sum::<f64>() / n_pop;
    provenance.final_population_range_mean = evals.iter().map(|e| e.fitness.range).sum::<f64>() / n_pop;

    // The final population backs up the archive when too few valid ones exist.
    for (v, e) in pop.iter().zip(&evals) {
        admit(v, e, true)?;
    }
    let pool = archive;

    let mut smoothed = Vec::new();
    let mut reverted_flags = Vec::new();
    for idx in problem.select(&pool) {
        let (values, reverted) = problem.smooth(&pool[idx].0)?;
        smoothed.push(values);
        reverted_flags.push(reverted);
    }
    let mut candidates: Vec<Candidate> = Vec::new();
    for (values, reverted) in problem.sparsify(smoothed)?.into_iter().zip(reverted_flags) {
        let eval = problem.eval(&values)?;
        candidates.push(Candidate {
            valid: eval.valid(target),
            predicted_label: eval.label,
            target_probability: eval.target_probability,
            fitness: eval.fitness,
            values,
            smoothing_reverted: reverted,
        });
    }

    provenance.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(CounterfactualSet {
        format: CFE_FORMAT.into(),
        version: CFE_VERSION,
        query: query.clone(),
        query_label,
        target_class: target,
        candidates,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{Hyperparams, Tree};
    use crate::physics::Bounds;
    use crate::series::FeatureLayout;

    /// Forest of identical stumps splitting feature 0 at `threshold`.
    fn stump_forest(d: usize, threshold: f64, n_trees: usize) -> ForestModel {
        let tree = Tree {
            feature: vec![0, -1, -1],
            threshold: vec![threshold, 0.0, 0.0],
            left: vec![1, 0, 0],
            right: vec![2, 0, 0],
            counts: vec![[5, 5], [5, 0], [0, 5]],
        };
        ForestModel {
            hyperparams: Hyperparams::default(),
            seed: 0,
            n_features: d,
            feature_names: (0..d).map(|i| format!("P3_w{}", i + 1)).collect(),
            trees: vec![tree; n_trees],
        }
    }

    fn one_channel_spec(w: usize, lo: f64, hi: f64) -> PhysicsSpec {
        let layout = FeatureLayout::new(vec!["P3".into()], w);
        let b = Bounds { min: lo, max: hi };
        PhysicsSpec::new(
            layout,
            (0..w).map(|j| vec![j]).collect(),
            vec![b; w],
            vec![1.0],
            vec![b; w],
        )
        .unwrap()
    }

    fn three_channel_spec(lo: f64, hi: f64) -> PhysicsSpec {
        let layout = FeatureLayout::new(vec!["P3".into(), "P5".into(), "P7".into()], 1);
        let b = Bounds { min: lo, max: hi };
        PhysicsSpec::new(layout, vec![vec![0, 1, 2]], vec![b; 3], vec![1.0; 3], vec![b; 3]).unwrap()
    }

    fn fv(values: Vec<f64>) -> FeatureVector {
        let names = (0..values.len()).map(|i| format!("P3_w{}", i + 1)).collect();
        FeatureVector::new(values, names, None).unwrap()
    }

    #[test]
    fn repair_examples() {
        let spec = three_channel_spec(-1e6, 1e6);
        assert_eq!(repair(&[9.0, 5.0, 1.0], &spec).unwrap(), vec![9.0, 5.0, 1.0]);
        assert_eq!(repair(&[5.0, 7.0, 1.0], &spec).unwrap(), vec![5.0, 5.0, 1.0]);
        let tight = three_channel_spec(0.0, 100.0);
        assert_eq!(repair(&[150.0, 50.0, 10.0], &tight).unwrap(), vec![100.0, 50.0, 10.0]);
        assert!(repair(&[1.0], &tight).is_err());
    }

    #[test]
    fn fitness_identity_candidate() {
        let model = stump_forest(2, 0.0, 4);
        let spec = one_channel_spec(2, -2.0, 2.0);
        let x = [1.0, 3.0]; // feature 1 out of range
        let f = fitness(&x, &x, 1, &model, &spec, &ObjectiveWeights::default(), 1e-6).unwrap();
        assert_eq!((f.proximity, f.sparsity, f.validity_loss), (0.0, 0.0, 0.0));
        assert_eq!(f.range, 1.0);
        assert_eq!(f.score, 10.0 * 1.0);
    }

    #[test]
    fn fitness_hinge_and_penalties() {
        // 10 trees: 9 vote class 1 for x0 > 0.
        let mut model = stump_forest(3, 0.0, 10);
        model.trees[9].threshold[0] = 100.0;
        let spec = three_channel_spec(0.0, 10.0);
        let w = ObjectiveWeights {
            proximity_weight: 0.0,
            sparsity_weight: 0.0,
            ordering_penalty_weight: 10.0,
            range_penalty_weight: 10.0,
            ..Default::default()
        };
        // (5, 7, 1): one ordering pair violated; 20 exceeds max 10 -> use 12 on P3 instead.
        let cand = [5.0, 7.0, 11.0];
        let f = fitness(&cand, &[5.0, 5.0, 1.0], 1, &model, &spec, &w, 1e-6).unwrap();
        assert_eq!(model.predict_proba(&cand).unwrap()[1], 0.9);
        assert_eq!(f.validity_loss, 0.0);
        // (5,7) and (7,11) both violated, 11 out of range.
        assert_eq!((f.ordering, f.range), (2.0, 1.0));
        let one_each = [5.0, 7.0, 1.0];
        let spec_small = three_channel_spec(0.0, 6.0);
        let g = fitness(&one_each, &one_each, 1, &model, &spec_small, &w, 1e-6).unwrap();
        assert_eq!((g.ordering, g.range), (1.0, 1.0));
        assert_eq!(g.score, 20.0);
    }

    #[test]
    fn degenerate_query_returns_itself() {
        let model = stump_forest(1, 0.0, 5);
        let spec = one_channel_spec(1, -2.0, 2.0);
        let q = fv(vec![1.0]);
        let cfg = GaConfig {
            target_class: Some(1),
            ..Default::default()
        };
        let set = evolve(&q, &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].values, q.values);
        assert!(set.candidates[0].valid);
        assert_eq!(set.candidates[0].fitness.proximity, 0.0);
    }

    #[test]
    fn stump_boundary_is_crossed_near_threshold() {
        let model = stump_forest(1, 0.0, 5);
        let spec = one_channel_spec(1, -2.0, 2.0);
        let q = fv(vec![-1.0]);
        let cfg = GaConfig {
            seed: 3,
            generations: 60,
            population_size: 60,
            ..Default::default()
        };
        let set = evolve(&q, &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        assert_eq!(set.target_class, 1);
        assert!(!set.candidates.is_empty());
        for c in &set.candidates {
            assert!(c.valid);
            assert!(c.values[0] > 0.0);
            assert!(c.values[0] < 0.25, "candidate {} far from boundary", c.values[0]);
        }
    }

    #[test]
    fn elitism_keeps_best_non_increasing() {
        let model = stump_forest(4, 0.0, 5);
        let spec = one_channel_spec(4, -2.0, 2.0);
        let q = fv(vec![-1.0, 0.3, -0.2, 1.5]);
        let cfg = GaConfig {
            seed: 11,
            generations: 40,
            population_size: 40,
            ..Default::default()
        };
        let set = evolve(&q, &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        let p = &set.provenance;
        for g in 1..p.best_score_history.len() {
            let key = |k: usize| {
                let invalid = !p.best_valid_history[k];
                let loss = if invalid { p.best_validity_loss_history[k] } else { 0.0 };
                (invalid, loss, p.best_score_history[k])
            };
            let (prev, cur) = (key(g - 1), key(g));
            assert!(
                cur.partial_cmp(&prev) != Some(Ordering::Greater),
                "generation {g}: {cur:?} after {prev:?}"
            );
        }
    }

    #[test]
    fn determinism_same_seed() {
        let model = stump_forest(4, 0.0, 5);
        let spec = one_channel_spec(4, -2.0, 2.0);
        let q = fv(vec![-1.0, 0.3, -0.2, 1.5]);
        let cfg = GaConfig {
            seed: 5,
            generations: 20,
            population_size: 30,
            ..Default::default()
        };
        let mut a = evolve(&q, &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        let mut b = evolve(&q, &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        a.provenance.runtime_seconds = 0.0;
        b.provenance.runtime_seconds = 0.0;
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let bad = [
            GaConfig {
                n_counterfactuals: 0,
                ..Default::default()
            },
            GaConfig {
                population_size: 2,
                n_counterfactuals: 3,
                ..Default::default()
            },
            GaConfig {
                tournament_size: 1,
                ..Default::default()
            },
            GaConfig {
                mutation_rate: 1.5,
                ..Default::default()
            },
            GaConfig {
                blend_alpha: 0.0,
                ..Default::default()
            },
            GaConfig {
                smoothing_window: 2,
                ..Default::default()
            },
            GaConfig {
                target_class: Some(2),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(GaConfig::default().validate().is_ok());
        let w = ObjectiveWeights {
            sparsity_weight: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let model = stump_forest(2, 0.0, 3);
        let spec = one_channel_spec(2, -1.0, 1.0);
        let q = fv(vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            evolve(&q, &model, &spec, &ObjectiveWeights::default(), &GaConfig::default()),
            Err(PgceError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unreachable_target_flags_invalid() {
        // Threshold above every bound: constrained search can never flip.
        let model = stump_forest(1, 5.0, 3);
        let spec = one_channel_spec(1, -2.0, 2.0);
        let q = fv(vec![-1.0]);
        let cfg = GaConfig {
            generations: 10,
            population_size: 20,
            ..Default::default()
        };
        let set = evolve(&q, &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        assert!(set.candidates.iter().all(|c| !c.valid));
        assert!(matches!(set.require_valid(), Err(PgceError::NoValidCandidate)));
    }

    #[test]
    fn set_json_round_trip() {
        let model = stump_forest(1, 0.0, 5);
        let spec = one_channel_spec(1, -2.0, 2.0);
        let cfg = GaConfig {
            generations: 5,
            population_size: 10,
            ..Default::default()
        };
        let set = evolve(&fv(vec![-1.0]), &model, &spec, &ObjectiveWeights::default(), &cfg).unwrap();
        let back = CounterfactualSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn repair_is_idempotent_and_feasible(vals in proptest::collection::vec(-50.0f64..150.0, 3)) {
                let spec = three_channel_spec(0.0, 100.0);
                let once = repair(&vals, &spec).unwrap();
                prop_assert_eq!(spec.ordering_violations(&once).unwrap(), 0);
                prop_assert_eq!(spec.range_violations(&once).unwrap(), 0);
                prop_assert_eq!(repair(&once, &spec).unwrap(), once);
            }
        }
    }
}
