//! Random forest classifier: bootstrap-aggregated CART trees with class
//! likelihoods, forest proximity, Gini importances and LOOCV evaluation.

mod eval;
mod tree;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::error::ForestError;
use crate::preprocess::FeatureVector;
use crate::SimRng;

pub use eval::{accuracy_from_confusion, loocv, ConfusionMatrix, LoocvReport};
pub use tree::{grow, Node, NodeDoc, TrainingView, Tree, TreeParams};

/// Version of the serialized model document.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// `None` means ⌈√p⌉.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidHyperparams("n_trees must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(ForestError::InvalidHyperparams(
                "min_samples_leaf must be >= 1".into(),
            ));
        }
        if self.features_per_split == Some(0) {
            return Err(ForestError::InvalidHyperparams(
                "features_per_split must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn features_per_split_for(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1))
    }

    /// Rng for tree `index`: the forest seed selects the key, the tree index
    /// the stream, so trees are independent of build order.
    pub fn tree_rng(&self, index: usize) -> SimRng {
        let mut rng = SimRng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Labeled training matrix assembled from feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted class names.
    pub classes: Vec<String>,
    pub n_features: usize,
    /// Row-major, `ids.len() × n_features`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub ids: Vec<Uuid>,
}

impl Dataset {
    /// Checks labels and dimensionality. Classes are the sorted distinct labels.
    pub fn from_vectors(vectors: &[FeatureVector]) -> Result<Self, ForestError> {
        let first = vectors.first().ok_or(ForestError::EmptyDataset)?;
        let n_features = first.len();
        let mut labels = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.len() != n_features {
                return Err(ForestError::DimensionMismatch {
                    expected: n_features,
                    found: v.len(),
                    record_id: v.record_id.to_string(),
                });
            }
            let label = v.label.as_deref().ok_or_else(|| ForestError::Unlabeled {
                record_id: v.record_id.to_string(),
            })?;
            labels.push(label);
        }
        let mut classes: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        classes.sort();
        classes.dedup();
        let y = labels
            .iter()
            .map(|l| {
                classes
                    .binary_search_by(|c| c.as_str().cmp(l))
                    .expect("label listed")
            })
            .collect();
        let mut x = Vec::with_capacity(vectors.len() * n_features);
        for v in vectors {
            x.extend_from_slice(&v.values);
        }
        Ok(Self {
            classes,
            n_features,
            x,
            y,
            ids: vectors.iter().map(|v| v.record_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    /// Copy without row `skip`; classes that disappear are dropped.
    pub fn without(&self, skip: usize) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| i != skip).collect();
        let mut present: Vec<usize> = keep.iter().map(|&i| self.y[i]).collect();
        present.sort_unstable();
        present.dedup();
        let remap = |c: usize| present.binary_search(&c).expect("present class");
        let mut x = Vec::with_capacity(keep.len() * self.n_features);
        for &i in &keep {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            classes: present.iter().map(|&c| self.classes[c].clone()).collect(),
            n_features: self.n_features,
            x,
            y: keep.iter().map(|&i| remap(self.y[i])).collect(),
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// SHA-256 over hyperparameters, classes and every (id, label, value).
    pub fn fingerprint(&self, h: &Hyperparams) -> String {
        let mut hasher = Sha256::new();
        hasher.update(MODEL_FORMAT_VERSION.to_le_bytes());
        hasher.update(serde_json::to_vec(h).expect("hyperparams serialize"));
        for c in &self.classes {
            hasher.update((c.len() as u64).to_le_bytes());
            hasher.update(c.as_bytes());
        }
        hasher.update((self.n_features as u64).to_le_bytes());
        for i in 0..self.len() {
            hasher.update(self.ids[i].as_bytes());
            hasher.update((self.y[i] as u64).to_le_bytes());
            for v in self.row(i) {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// A trained, immutable forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub n_features: usize,
    pub hyperparams: Hyperparams,
    pub fingerprint: String,
    pub training_sample_ids: Vec<Uuid>,
    /// `training_leaves[s][t]`: leaf of training sample `s` in tree `t`.
    pub training_leaves: Vec<Vec<u32>>,
    /// Normalized mean Gini importance per feature.
    pub feature_importances: Vec<f64>,
    pub trees: Vec<Tree>,
}

/// Class likelihoods for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub likelihoods: BTreeMap<String, f64>,
    pub top_class: String,
    pub confidence: f64,
}

/// Trains a forest. Deterministic in (dataset order, `h`).
pub fn train(vectors: &[FeatureVector], h: &Hyperparams) -> Result<ForestModel, ForestError> {
    train_dataset(&Dataset::from_vectors(vectors)?, h)
}

pub fn train_dataset(data: &Dataset, h: &Hyperparams) -> Result<ForestModel, ForestError> {
    h.validate()?;
    if data.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    if data.classes.len() < 2 {
        return Err(ForestError::SingleClass(data.classes.len()));
    }
    let view = TrainingView {
        x: &data.x,
        n_features: data.n_features,
        y: &data.y,
        n_classes: data.classes.len(),
    };
    let params = TreeParams {
        max_depth: h.max_depth,
        min_samples_leaf: h.min_samples_leaf,
        features_per_split: h.features_per_split_for(data.n_features),
    };
    let n = data.len();
    let mut importances = vec![0.0; data.n_features];
    let mut contributing = 0usize;
    let mut trees = Vec::with_capacity(h.n_trees);
    let mut samples = Vec::with_capacity(n);
    for t in 0..h.n_trees {
        let mut rng = h.tree_rng(t);
        samples.clear();
        if h.bootstrap {
            samples.extend((0..n).map(|_| rng.random_range(0..n)));
        } else {
            samples.extend(0..n);
        }
        let (tree, raw) = grow(view, &mut samples, params, &mut rng);
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            contributing += 1;
            for (acc, r) in importances.iter_mut().zip(&raw) {
                *acc += r / total;
            }
        }
        trees.push(tree);
    }
    if contributing > 0 {
        let sum: f64 = importances.iter().sum();
        importances.iter_mut().for_each(|v| *v /= sum);
    }
    let training_leaves = (0..n)
        .map(|i| {
            let row = data.row(i);
            trees.iter().map(|t| t.leaf_index(row) as u32).collect()
        })
        .collect();
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        classes: data.classes.clone(),
        n_features: data.n_features,
        hyperparams: *h,
        fingerprint: data.fingerprint(h),
        training_sample_ids: data.ids.clone(),
        training_leaves,
        feature_importances: importances,
        trees,
    })
}

impl ForestModel {
    pub fn check_dimension(&self, x: &FeatureVector) -> Result<(), ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
                record_id: x.record_id.to_string(),
            });
        }
        Ok(())
    }

    /// Likelihood per class, aligned with `self.classes`.
    pub fn likelihoods(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes.len()];
        for tree in &self.trees {
            let counts = tree.leaf_counts(tree.leaf_index(x));
            let total: u32 = counts.iter().sum();
            for (a, &c) in acc.iter_mut().zip(counts) {
                *a += f64::from(c) / f64::from(total);
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Index of the most likely class; ties go to the earliest class name.
    pub fn top_index(likelihoods: &[f64]) -> usize {
        let mut best = 0;
        for (i, &p) in likelihoods.iter().enumerate() {
            if p > likelihoods[best] {
                best = i;
            }
        }
        best
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> Result<Prediction, ForestError> {
        self.check_dimension(x)?;
        let l = self.likelihoods(&x.values);
        let top = Self::top_index(&l);
        Ok(Prediction {
            top_class: self.classes[top].clone(),
            confidence: l[top],
            likelihoods: self.classes.iter().cloned().zip(l).collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> &str {
        &self.classes[Self::top_index(&self.likelihoods(x))]
    }

    /// Leaf index of `x` in every tree.
    pub fn leaves(&self, x: &[f64]) -> Vec<u32> {
        self.trees.iter().map(|t| t.leaf_index(x) as u32).collect()
    }

    /// Fraction of trees in which `a` and `b` share a leaf.
    pub fn proximity(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64, ForestError> {
        self.check_dimension(a)?;
        self.check_dimension(b)?;
        Ok(self.leaf_proximity(&self.leaves(&a.values), &self.leaves(&b.values)))
    }

    fn leaf_proximity(&self, a: &[u32], b: &[u32]) -> f64 {
        let shared = a.iter().zip(b).filter(|(x, y)| x == y).count();
        shared as f64 / self.trees.len() as f64
    }

    /// Proximity of `x` to every training sample, in training order.
    pub fn training_similarities(&self, x: &FeatureVector) -> Result<Vec<(Uuid, f64)>, ForestError> {
        self.check_dimension(x)?;
        let leaves = self.leaves(&x.values);
        Ok(self
            .training_sample_ids
            .iter()
            .zip(&self.training_leaves)
            .map(|(id, train)| (*id, self.leaf_proximity(&leaves, train)))
            .collect())
    }

    pub fn feature_importance(&self) -> &[f64] {
        &self.feature_importances
    }
}

/// Mean importance per feature inside `indices` and outside it.
pub fn importance_split(importances: &[f64], indices: &[usize]) -> (f64, f64) {
    let mut inside = vec![false; importances.len()];
    for &i in indices {
        inside[i] = true;
    }
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (v, &is_in) in importances.iter().zip(&inside) {
        if is_in {
            sum_in += v;
        } else {
            sum_out += v;
        }
    }
    let n_in = indices.len().max(1) as f64;
    let n_out = (importances.len() - indices.len()).max(1) as f64;
    (sum_in / n_in, sum_out / n_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fv(id: u128, label: &str, values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            record_id: Uuid::from_u128(id),
            label: Some(label.into()),
            n_sample_frames: values.len(),
            values,
        }
    }

    fn separable() -> Vec<FeatureVector> {
        (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { -1.0 } else { 1.0 };
                let label = if s < 0.0 { "neg" } else { "pos" };
                fv(
                    i,
                    label,
                    vec![s * (1.0 + i as f64), s * 0.5, s * (3.0 + (i % 3) as f64)],
                )
            })
            .collect()
    }

    #[test]
    fn separable_training_accuracy_is_perfect() {
        let data = separable();
        let m = train(&data, &Hyperparams::default()).unwrap();
        assert_eq!(m.trees.len(), 200);
        for v in &data {
            assert_eq!(Some(m.predict(&v.values)), v.label.as_deref());
        }
    }

    #[test]
    fn fingerprint_is_deterministic() {
        let data = separable();
        let h = Hyperparams {
            n_trees: 10,
            seed: 9,
            ..Hyperparams::default()
        };
        let a = train(&data, &h).unwrap();
        let b = train(&data, &h).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_eq!(a, b);
        let c = train(&data, &Hyperparams { seed: 10, ..h }).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
    }

    #[test]
    fn training_errors() {
        let one_class: Vec<_> = (0..4).map(|i| fv(i, "a", vec![i as f64])).collect();
        assert_eq!(
            train(&one_class, &Hyperparams::default()),
            Err(ForestError::SingleClass(1))
        );
        let mut ragged = separable();
        ragged[3].values.push(0.0);
        assert!(matches!(
            train(&ragged, &Hyperparams::default()),
            Err(ForestError::DimensionMismatch {
                expected: 3,
                found: 4,
                ..
            })
        ));
        let mut unlabeled = separable();
        unlabeled[1].label = None;
        assert!(matches!(
            train(&unlabeled, &Hyperparams::default()),
            Err(ForestError::Unlabeled { .. })
        ));
        assert_eq!(
            train(&[], &Hyperparams::default()),
            Err(ForestError::EmptyDataset)
        );
        let bad = Hyperparams {
            n_trees: 0,
            ..Hyperparams::default()
        };
        assert!(matches!(
            train(&separable(), &bad),
            Err(ForestError::InvalidHyperparams(_))
        ));
    }

    #[test]
    fn single_pure_tree_is_one_hot() {
        let h = Hyperparams {
            n_trees: 1,
            bootstrap: false,
            ..Hyperparams::default()
        };
        let data = separable();
        let m = train(&data, &h).unwrap();
        let p = m.predict_proba(&data[0]).unwrap();
        assert_eq!(p.likelihoods["neg"], 1.0);
        assert_eq!(p.likelihoods["pos"], 0.0);
        assert_eq!(p.top_class, "neg");
        assert_eq!(p.confidence, 1.0);
    }

    #[test]
    fn prediction_rejects_wrong_dimension() {
        let m = train(
            &separable(),
            &Hyperparams {
                n_trees: 3,
                ..Hyperparams::default()
            },
        )
        .unwrap();
        let short = fv(99, "neg", vec![1.0]);
        assert!(matches!(
            m.predict_proba(&short),
            Err(ForestError::DimensionMismatch { .. })
        ));
        assert!(m.proximity(&short, &short).is_err());
    }

    #[test]
    fn proximity_zero_when_root_separates() {
        // One feature, one split: every tree (no bootstrap) puts them apart.
        let data = vec![
            fv(1, "a", vec![0.0]),
            fv(2, "a", vec![1.0]),
            fv(3, "b", vec![5.0]),
            fv(4, "b", vec![6.0]),
        ];
        let h = Hyperparams {
            n_trees: 5,
            bootstrap: false,
            ..Hyperparams::default()
        };
        let m = train(&data, &h).unwrap();
        assert_eq!(m.proximity(&data[0], &data[3]).unwrap(), 0.0);
        assert_eq!(m.proximity(&data[0], &data[1]).unwrap(), 1.0);
        assert_eq!(m.proximity(&data[2], &data[2]).unwrap(), 1.0);
    }

    #[test]
    fn training_similarity_matches_pairwise_proximity() {
        let data = separable();
        let m = train(
            &data,
            &Hyperparams {
                n_trees: 25,
                ..Hyperparams::default()
            },
        )
        .unwrap();
        let sims = m.training_similarities(&data[4]).unwrap();
        assert_eq!(sims.len(), data.len());
        for ((id, s), v) in sims.iter().zip(&data) {
            assert_eq!(*id, v.record_id);
            assert_eq!(*s, m.proximity(&data[4], v).unwrap());
        }
        assert_eq!(sims[4].1, 1.0);
    }

    #[test]
    fn importances_sum_to_one_and_skip_constants() {
        let data: Vec<_> = (0..30)
            .map(|i| {
                let label = if i % 3 == 0 {
                    "x"
                } else if i % 3 == 1 {
                    "y"
                } else {
                    "z"
                };
                fv(
                    i,
                    label,
                    vec![7.0, (i % 3) as f64 + 0.01 * i as f64, ((i * 7919) % 13) as f64],
                )
            })
            .collect();
        let m = train(
            &data,
            &Hyperparams {
                n_trees: 50,
                ..Hyperparams::default()
            },
        )
        .unwrap();
        let imp = m.feature_importance();
        assert_eq!(imp[0], 0.0);
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(imp[1] > imp[2]);
    }

    #[test]
    fn model_document_round_trip() {
        let m = train(
            &separable(),
            &Hyperparams {
                n_trees: 4,
                ..Hyperparams::default()
            },
        )
        .unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: ForestModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["hyperparams"]["n_trees"], 4);
    }

    #[test]
    fn dataset_without_drops_vanished_class() {
        let data = vec![
            fv(1, "a", vec![0.0]),
            fv(2, "b", vec![1.0]),
            fv(3, "b", vec![2.0]),
        ];
        let d = Dataset::from_vectors(&data).unwrap();
        let rest = d.without(0);
        assert_eq!(rest.classes, vec!["b".to_string()]);
        assert_eq!(rest.y, vec![0, 0]);
        assert_eq!(rest.row(1), &[2.0]);
    }

    #[test]
    fn importance_split_averages() {
        let (a, b) = importance_split(&[0.4, 0.4, 0.1, 0.1], &[0, 1]);
        assert!((a - 0.4).abs() < 1e-12 && (b - 0.1).abs() < 1e-12);
    }
}
