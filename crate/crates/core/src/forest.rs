//! Random-forest classifier over feature vectors.
//!
//! Each tree is grown on a bootstrap resample with Gini splits over a random
//! feature subset per node. Tree `t` draws from its own RNG stream derived
//! from the master seed, so parallel and serial training agree exactly.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PgceError, Result};
use crate::metrics::{skill_scores, ConfusionCounts, SkillScores};
use crate::rng;
use crate::series::FeatureVector;

pub const MODEL_FORMAT: &str = "pgce-forest";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub feature_subsample: Option<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n_trees: 50,
            max_depth: 8,
            min_leaf: 1,
            feature_subsample: None,
        }
    }
}

impl Hyperparams {
    pub fn features_per_split(&self, d: usize) -> usize {
        self.feature_subsample
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(PgceError::InvalidHyperparams(
                "n_trees, max_depth and min_leaf must be positive".into(),
            ));
        }
        if self.feature_subsample == Some(0) {
            return Err(PgceError::InvalidHyperparams(
                "feature_subsample must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Default search grid for cross-validation.
pub fn default_grid() -> Vec<Hyperparams> {
    let mut grid = Vec::new();
    for n_trees in [50, 100] {
        for max_depth in [4, 8] {
            grid.push(Hyperparams {
                n_trees,
                max_depth,
                min_leaf: 1,
                feature_subsample: None,
            });
        }
    }
    grid
}

/// Flat-array decision tree. Node `k` is a leaf when `feature[k] < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub counts: Vec<[u32; 2]>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> usize {
        let mut k = 0;
        while self.feature[k] >= 0 {
            k = if x[self.feature[k] as usize] <= self.threshold[k] {
                self.left[k] as usize
            } else {
                self.right[k] as usize
            };
        }
        k
    }

    /// Majority class of the reached leaf; ties go to class 0.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let c = self.counts[self.leaf_for(x)];
        u8::from(c[1] > c[0])
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    pub fn max_feature_index(&self) -> Option<usize> {
        self.feature.iter().filter(|f| **f >= 0).map(|f| *f as usize).max()
    }

    fn push_leaf(&mut self, counts: [u32; 2]) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.counts.push(counts);
        self.feature.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = counts[1] as f64 / n;
    2.0 * p * (1.0 - p)
}

struct Grower<'a, R: Rng> {
    rows: &'a [&'a [f64]],
    labels: &'a [u8],
    params: Hyperparams,
    mtry: usize,
    d: usize,
    rng: R,
    tree: Tree,
}

impl<R: Rng> Grower<'_, R> {
    fn counts(&self, idx: &[usize]) -> [usize; 2] {
        let ones = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        [idx.len() - ones, ones]
    }

    /// Grows the subtree over `idx` and returns its node index.
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let counts = self.counts(idx);
        let as_u32 = [counts[0] as u32, counts[1] as u32];
        if depth >= self.params.max_depth || counts[0] == 0 || counts[1] == 0 || idx.len() < 2 * self.params.min_leaf {
            return self.tree.push_leaf(as_u32);
        }
        let parent = gini(counts);
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let features = sample(&mut self.rng, self.d, self.mtry);
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
        for f in features.iter() {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.rows[i][f], self.labels[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0usize; 2];
            for k in 0..pairs.len() - 1 {
                left[pairs[k].1 as usize] += 1;
                if pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                let nl = k + 1;
                let nr = pairs.len() - nl;
                if nl < self.params.min_leaf || nr < self.params.min_leaf {
                    continue;
                }
                let right = [counts[0] - left[0], counts[1] - left[1]];
                let impurity = (nl as f64 * gini(left) + nr as f64 * gini(right)) / n;
                if best.is_none_or(|b| impurity < b.0) {
                    best = Some((impurity, f, 0.5 * (pairs[k].0 + pairs[k + 1].0)));
                }
            }
        }
        let Some((impurity, feature, threshold)) = best.filter(|b| b.0 < parent - 1e-12) else {
            return self.tree.push_leaf(as_u32);
        };
        let _ = impurity;
        let node = self.tree.push_leaf(as_u32);
        self.tree.feature[node] = feature as i32;
        self.tree.threshold[node] = threshold;
        let mut split = 0;
        for k in 0..idx.len() {
            if self.rows[idx[k]][feature] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.tree.left[node] = left as u32;
        self.tree.right[node] = right as u32;
        node
    }
}

/// Rows, class labels and feature dimension of a labeled training set.
type Labeled<'a> = (Vec<&'a [f64]>, Vec<u8>, usize);

fn labeled(dataset: &[FeatureVector]) -> Result<Labeled<'_>> {
    let first = dataset.first().ok_or(PgceError::EmptyTrainingSet)?;
    let d = first.dim();
    let mut rows = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for (i, x) in dataset.iter().enumerate() {
        if x.dim() != d {
            return Err(PgceError::dims(d, x.dim()));
        }
        let label = x.label.ok_or(PgceError::Unlabeled(i))?;
        rows.push(x.values.as_slice());
        labels.push(label.class_index());
    }
    Ok((rows, labels, d))
}

pub fn train(dataset: &[FeatureVector], params: Hyperparams, seed: u64) -> Result<ForestModel> {
    params.validate()?;
    let (rows, labels, d) = labeled(dataset)?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(PgceError::SingleClassDataset);
    }
    let mtry = params.features_per_split(d);
    let n = rows.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, t as u64);
            let mut idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let mut grower = Grower {
                rows: &rows,
                labels: &labels,
                params,
                mtry,
                d,
                rng: r,
                tree: Tree {
                    feature: vec![],
                    threshold: vec![],
                    left: vec![],
                    right: vec![],
                    counts: vec![],
                },
            };
            grower.grow(&mut idx, 0);
            grower.tree
        })
        .collect();
    Ok(ForestModel {
        hyperparams: params,
        seed,
        n_features: d,
        feature_names: dataset[0].names.clone(),
        trees,
    })
}

impl ForestModel {
    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(PgceError::dims(self.n_features, x.len()));
        }
        Ok(())
    }

    pub fn votes(&self, x: &[f64]) -> Result<usize> {
        self.check(x)?;
        Ok(self.trees.iter().map(|t| t.predict(x) as usize).sum())
    }

    /// `[p(class 0), p(class 1)]` as vote fractions.
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2]> {
        let ones = self.votes(x)?;
        let zeros = self.trees.len() - ones;
        let n = self.trees.len() as f64;
        Ok([zeros as f64 / n, ones as f64 / n])
    }

    /// Argmax label; a tied vote goes to class 0.
    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        let ones = self.votes(x)?;
        Ok(u8::from(2 * ones > self.trees.len()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            class_labels: ["non-SEP".into(), "SEP".into()],
            hyperparams: self.hyperparams,
            seed: self.seed,
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            trees: self.trees.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(PgceError::InvalidHyperparams(format!(
                "unknown model format {}",
                file.format
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(PgceError::UnsupportedVersion {
                kind: "model",
                found: file.version,
                expected: MODEL_VERSION,
            });
        }
        if file.feature_names.len() != file.n_features {
            return Err(PgceError::dims(file.n_features, file.feature_names.len()));
        }
        for tree in &file.trees {
            let len = tree.feature.len();
            if len == 0
                || [
                    tree.threshold.len(),
                    tree.left.len(),
                    tree.right.len(),
                    tree.counts.len(),
                ]
                .iter()
                .any(|l| *l != len)
            {
                return Err(PgceError::InvalidHyperparams("malformed tree arrays".into()));
            }
            if tree.max_feature_index().is_some_and(|f| f >= file.n_features) {
                return Err(PgceError::InvalidHyperparams("split feature out of range".into()));
            }
            for k in 0..len {
                if tree.feature[k] >= 0 {
                    let (l, r) = (tree.left[k] as usize, tree.right[k] as usize);
                    if l <= k || r <= k || l >= len || r >= len {
                        return Err(PgceError::InvalidHyperparams("malformed tree links".into()));
                    }
                } else if tree.counts[k] == [0, 0] {
                    return Err(PgceError::InvalidHyperparams("empty leaf".into()));
                }
            }
        }
        Ok(ForestModel {
            hyperparams: file.hyperparams,
            seed: file.seed,
            n_features: file.n_features,
            feature_names: file.feature_names,
            trees: file.trees,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| PgceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgceError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Confusion counts of this model's labels against the dataset labels.
    pub fn evaluate(&self, dataset: &[FeatureVector]) -> Result<ConfusionCounts> {
        let (rows, labels, _) = labeled(dataset)?;
        let predicted = rows.iter().map(|r| self.predict(r)).collect::<Result<Vec<_>>>()?;
        Ok(ConfusionCounts::from_predictions(&labels, &predicted))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    class_labels: [String; 2],
    hyperparams: Hyperparams,
    seed: u64,
    n_features: usize,
    feature_names: Vec<String>,
    trees: Vec<Tree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub confusion: ConfusionCounts,
    pub scores: SkillScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointResult {
    pub hyperparams: Hyperparams,
    pub folds: Vec<FoldScore>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best_index: usize,
    pub best: Hyperparams,
    pub grid: Vec<GridPointResult>,
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(PgceError::InvalidHyperparams("need at least 2 folds".into()));
    }
    let mut assignment = vec![0; labels.len()];
    for class in 0u8..2 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < folds {
            return Err(PgceError::InsufficientClassMembers {
                class,
                members: members.len(),
                folds,
            });
        }
        let mut r = rng::stream(seed, 1_000 + class as u64);
        rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut r);
        for (k, i) in members.into_iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    Ok(assignment)
}

/// Grid search with stratified k-fold CV, maximizing mean positive-class F1.
/// Ties keep the earliest grid point. Undefined F1 counts as 0.
pub fn cross_validate(dataset: &[FeatureVector], folds: usize, grid: &[Hyperparams], seed: u64) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(PgceError::InvalidHyperparams("empty hyperparameter grid".into()));
    }
    let (_, labels, _) = labeled(dataset)?;
    let assignment = stratified_folds(&labels, folds, seed)?;
    let mut results = Vec::with_capacity(grid.len());
    for (g, params) in grid.iter().enumerate() {
        let mut scores = Vec::with_capacity(folds);
        for fold in 0..folds {
            let (train_set, test_set): (Vec<_>, Vec<_>) =
                dataset.iter().zip(&assignment).partition(|(_, a)| **a != fold);
            let train_set: Vec<FeatureVector> = train_set.into_iter().map(|(x, _)| x.clone()).collect();
            let test_set: Vec<FeatureVector> = test_set.into_iter().map(|(x, _)| x.clone()).collect();
            let model = train(&train_set, *params, rng::derive_seed(seed, (g * folds + fold) as u64))?;
            let confusion = model.evaluate(&test_set)?;
            scores.push(FoldScore {
                fold,
                confusion,
                scores: skill_scores(&confusion),
            });
        }
        let mean_f1 = scores.iter().map(|s| s.scores.f1.unwrap_or(0.0)).sum::<f64>() / folds as f64;
        results.push(GridPointResult {
            hyperparams: *params,
            folds: scores,
            mean_f1,
        });
    }
    let mut best_index = 0;
    for (i, r) in results.iter().enumerate() {
        if r.mean_f1 > results[best_index].mean_f1 {
            best_index = i;
        }
    }
    Ok(CvReport {
        best_index,
        best: results[best_index].hyperparams,
        grid: results,
    })
}
