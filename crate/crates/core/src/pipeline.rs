//! Offline pipeline: simulate a pack, preprocess, cross-validate, and
//! summarize where the forest finds its information.

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::forest::{importance_split, loocv, train, ConfusionMatrix, Hyperparams};
use crate::preprocess::{early_transient_indices, preprocess, FeatureVector, EARLY_TRANSIENT_CUTOFF};
use crate::scenario::ScenarioPack;

/// Importance mass of the first frames after immersion versus the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    /// Within-channel positions below this count as early.
    pub cutoff: usize,
    pub early_features: usize,
    pub late_features: usize,
    /// Summed importance of early features (importances sum to 1).
    pub early_mass: f64,
    pub late_mass: f64,
    /// Mean importance per early feature.
    pub early_mean: f64,
    pub late_mean: f64,
}

impl ImportanceSummary {
    pub fn from_importances(importances: &[f64], n_sample_frames: usize, cutoff: usize) -> Self {
        let early = early_transient_indices(n_sample_frames, cutoff);
        let (early_mean, late_mean) = importance_split(importances, &early);
        let early_mass: f64 = early.iter().map(|&i| importances[i]).sum();
        let total: f64 = importances.iter().sum();
        Self {
            cutoff,
            early_features: early.len(),
            late_features: importances.len() - early.len(),
            early_mass,
            late_mass: total - early_mass,
            early_mean,
            late_mean,
        }
    }

    /// Early mean over late mean; infinite when late features carry nothing.
    pub fn ratio(&self) -> f64 {
        self.early_mean / self.late_mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pack: String,
    pub seed: u64,
    pub n_records: usize,
    pub n_features: usize,
    pub hyperparams: Hyperparams,
    pub loocv_accuracy: f64,
    /// `[predicted][true]`.
    pub confusion_matrix: ConfusionMatrix,
    /// From a forest trained on the whole pack.
    pub importance: ImportanceSummary,
}

/// Simulated, preprocessed feature vectors of every replicate in the pack.
pub fn pack_features(pack: &ScenarioPack, seed: u64) -> Result<Vec<FeatureVector>, PipelineError> {
    pack.simulate(seed)?
        .iter()
        .map(|r| preprocess(r).map_err(PipelineError::from))
        .collect()
}

/// Runs the whole pipeline with the pack simulated and the forest seeded by `seed`.
pub fn evaluate_pack(
    pack: &ScenarioPack,
    seed: u64,
    base: &Hyperparams,
) -> Result<Evaluation, PipelineError> {
    let vectors = pack_features(pack, seed)?;
    let h = Hyperparams { seed, ..*base };
    let report = loocv(&vectors, &h)?;
    let model = train(&vectors, &h)?;
    let n_sample_frames = vectors[0].n_sample_frames;
    Ok(Evaluation {
        pack: pack.name.clone(),
        seed,
        n_records: vectors.len(),
        n_features: model.n_features,
        hyperparams: h,
        loocv_accuracy: report.accuracy,
        confusion_matrix: report.confusion,
        importance: ImportanceSummary::from_importances(
            model.feature_importance(),
            n_sample_frames,
            EARLY_TRANSIENT_CUTOFF,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_uniform_importances() {
        let imp = vec![1.0 / 300.0; 300];
        let s = ImportanceSummary::from_importances(&imp, 100, 20);
        assert_eq!(s.early_features, 60);
        assert_eq!(s.late_features, 240);
        assert!((s.early_mass - 0.2).abs() < 1e-12);
        assert!((s.ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let pack = ScenarioPack::builtin("beverages").unwrap();
        let h = Hyperparams {
            n_trees: 15,
            ..Hyperparams::default()
        };
        let a = evaluate_pack(&pack, 3, &h).unwrap();
        let b = evaluate_pack(&pack, 3, &h).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_records, 21);
        assert_eq!(a.n_features, 360);
        assert_eq!(a.confusion_matrix.total(), 21);
    }
}
