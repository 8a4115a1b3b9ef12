use std::fmt;

use serde::{Deserialize, Serialize};

use super::{train_dataset, Dataset, ForestModel, Hyperparams};
use crate::error::ForestError;
use crate::preprocess::FeatureVector;

/// Observation counts with rows = predicted class, columns = true class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[predicted][true]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Builds a matrix from rows of predicted-class counts.
    pub fn from_rows(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, ForestError> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(ForestError::InvalidHyperparams(format!(
                "confusion matrix must be {k}×{k}"
            )));
        }
        Ok(Self { classes, counts })
    }

    fn index(&self, class: &str) -> Result<usize, ForestError> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| ForestError::UnknownClass(class.to_string()))
    }

    pub fn record(&mut self, predicted: &str, truth: &str) -> Result<(), ForestError> {
        let p = self.index(predicted)?;
        let t = self.index(truth)?;
        self.counts[p][t] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Observations per true class.
    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.classes.len())
            .map(|t| self.counts.iter().map(|row| row[t]).sum())
            .collect()
    }

    /// Predictions per class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// (correct, total) as exact integers.
    pub fn accuracy_ratio(&self) -> (u64, u64) {
        (self.trace(), self.total())
    }
}

impl fmt::Display for ConfusionMatrix {
    /// Table with predicted classes down the side and true classes across.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .classes
            .iter()
            .map(|c| c.len())
            .chain(self.counts.iter().flatten().map(|v| v.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(4);
        let label = "Predicted";
        writeln!(f, "{:>lw$}   True", "", lw = label.len() + width + 1)?;
        write!(f, "{:lw$}", "", lw = label.len() + width + 1)?;
        for c in &self.classes {
            write!(f, " {c:>width$}")?;
        }
        writeln!(f)?;
        for (i, row) in self.counts.iter().enumerate() {
            let side = if i == 0 { label } else { "" };
            write!(f, "{side:<lw$} {:>width$}", self.classes[i], lw = label.len())?;
            for v in row {
                write!(f, " {v:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// trace / total.
pub fn accuracy_from_confusion(cm: &ConfusionMatrix) -> Result<f64, ForestError> {
    let (correct, total) = cm.accuracy_ratio();
    if total == 0 {
        return Err(ForestError::EmptyMatrix);
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvReport {
    pub folds: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Predicted class for each held-out sample, in dataset order.
    pub predictions: Vec<String>,
}

/// Leave-one-out cross-validation. Fold `i` trains on every sample but `i`
/// with seed `h.seed + i` (wrapping) and predicts sample `i`.
pub fn loocv(vectors: &[FeatureVector], h: &Hyperparams) -> Result<LoocvReport, ForestError> {
    let data = Dataset::from_vectors(vectors)?;
    h.validate()?;
    if data.len() < 2 {
        return Err(ForestError::EmptyDataset);
    }
    if data.classes.len() < 2 {
        return Err(ForestError::SingleClass(data.classes.len()));
    }
    let counts = data.class_counts();
    for i in 0..data.len() {
        let remaining = counts
            .iter()
            .enumerate()
            .filter(|&(c, &n)| n - usize::from(c == data.y[i]) > 0)
            .count();
        if remaining < 2 {
            return Err(ForestError::DegenerateFold {
                fold: i,
                record_id: data.ids[i].to_string(),
            });
        }
    }

    let mut confusion = ConfusionMatrix::new(data.classes.clone());
    let mut predictions = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let fold_h = Hyperparams {
            seed: h.seed.wrapping_add(i as u64),
            ..*h
        };
        let model: ForestModel = train_dataset(&data.without(i), &fold_h)?;
        let predicted = model.predict(data.row(i)).to_string();
        confusion.record(&predicted, &data.classes[data.y[i]])?;
        predictions.push(predicted);
    }
    let accuracy = accuracy_from_confusion(&confusion)?;
    Ok(LoocvReport {
        folds: data.len(),
        accuracy,
        confusion,
        predictions,
    })
}
