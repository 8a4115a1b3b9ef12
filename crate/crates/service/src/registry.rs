//! Model registry: training jobs, descriptors and deployed forests.
//!
//! Each model lives in `models/{model_id}.json` as `{descriptor, model}`.
//! Files are written to a temporary name and renamed into place, so a crash
//! never leaves a half-written model behind. A model is immutable once ready.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use etongue_core::forest::Dataset;
use etongue_core::{
    loocv, preprocess, train, ConfusionMatrix, FeatureVector, ForestError, ForestModel, Hyperparams,
    PreprocessError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::store::StoredRecord;

/// Hex characters of the dataset fingerprint used as model id.
pub const MODEL_ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Training,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub status: ModelStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub completed_at: Option<DateTime<Utc>>,
    pub fingerprint: String,
    pub classes: Vec<String>,
    pub n_features: usize,
    pub n_training_records: usize,
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub label_filter: Option<Vec<String>>,
    #[serde(default)]
    pub loocv_accuracy: Option<f64>,
    /// `[predicted][true]`.
    #[serde(default)]
    pub confusion_matrix: Option<ConfusionMatrix>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    /// Labels to include; all labeled records when absent.
    #[serde(default)]
    pub label_filter: Option<Vec<String>>,
    #[serde(default)]
    pub hyperparams: Option<Hyperparams>,
    /// Overrides `hyperparams.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TrainRequest {
    pub fn effective_hyperparams(&self) -> Hyperparams {
        let mut h = self.hyperparams.unwrap_or_default();
        if let Some(seed) = self.seed {
            h.seed = seed;
        }
        h
    }
}

/// Why a training request cannot start.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("training needs at least 2 classes among labeled records, found {found:?}")]
    InsufficientClasses { found: Vec<String> },
    #[error("feature length differs from the majority length {expected} for records {record_ids:?}")]
    DimensionMismatch { expected: usize, record_ids: Vec<Uuid> },
    #[error("class {class:?} has a single record ({record_id}); its LOOCV fold would leave one class")]
    DegenerateFold { class: String, record_id: Uuid },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// A validated training set, ready to run.
#[derive(Debug, Clone)]
pub struct TrainingJob {
    pub model_id: String,
    pub fingerprint: String,
    pub hyperparams: Hyperparams,
    pub label_filter: Option<Vec<String>>,
    pub vectors: Vec<FeatureVector>,
    pub classes: Vec<String>,
}

impl TrainingJob {
    /// Selects labeled records (receipt order), preprocesses and checks them.
    pub fn prepare(records: &[Arc<StoredRecord>], request: &TrainRequest) -> Result<Self, TrainingError> {
        let h = request.effective_hyperparams();
        h.validate()?;
        let wanted: Option<BTreeSet<&str>> = request
            .label_filter
            .as_ref()
            .map(|v| v.iter().map(String::as_str).collect());
        let mut vectors = Vec::new();
        for stored in records {
            let Some(label) = stored.record.label.as_deref() else {
                continue;
            };
            if wanted.as_ref().is_some_and(|w| !w.contains(label)) {
                continue;
            }
            vectors.push(preprocess(&stored.record)?);
        }

        let mut counts: BTreeMap<&str, Vec<Uuid>> = BTreeMap::new();
        for v in &vectors {
            counts
                .entry(v.label.as_deref().expect("filtered to labeled"))
                .or_default()
                .push(v.record_id);
        }
        let classes: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
        if classes.len() < 2 {
            return Err(TrainingError::InsufficientClasses { found: classes });
        }

        let expected = majority_len(&vectors);
        let odd: Vec<Uuid> = vectors
            .iter()
            .filter(|v| v.len() != expected)
            .map(|v| v.record_id)
            .collect();
        if !odd.is_empty() {
            return Err(TrainingError::DimensionMismatch {
                expected,
                record_ids: odd,
            });
        }

        // Holding out a singleton class of a two-class set leaves one class.
        if classes.len() == 2 {
            if let Some((class, ids)) = counts.iter().find(|(_, ids)| ids.len() == 1) {
                return Err(TrainingError::DegenerateFold {
                    class: class.to_string(),
                    record_id: ids[0],
                });
            }
        }

        let fingerprint = Dataset::from_vectors(&vectors)?.fingerprint(&h);
        Ok(Self {
            model_id: fingerprint[..MODEL_ID_LEN].to_string(),
            fingerprint,
            hyperparams: h,
            label_filter: request.label_filter.clone(),
            vectors,
            classes,
        })
    }

    pub fn pending_descriptor(&self, now: DateTime<Utc>) -> ModelDescriptor {
        ModelDescriptor {
            model_id: self.model_id.clone(),
            status: ModelStatus::Training,
            created_at: now,
            completed_at: None,
            fingerprint: self.fingerprint.clone(),
            classes: self.classes.clone(),
            n_features: self.vectors.first().map_or(0, FeatureVector::len),
            n_training_records: self.vectors.len(),
            hyperparams: self.hyperparams,
            label_filter: self.label_filter.clone(),
            loocv_accuracy: None,
            confusion_matrix: None,
            error: None,
        }
    }

    /// Trains the deployable forest and runs LOOCV. CPU-bound.
    pub fn run(&self) -> Result<(ForestModel, etongue_core::LoocvReport), ForestError> {
        let model = train(&self.vectors, &self.hyperparams)?;
        let report = loocv(&self.vectors, &self.hyperparams)?;
        Ok((model, report))
    }
}

/// Most common feature length; ties go to the longer length.
fn majority_len(vectors: &[FeatureVector]) -> usize {
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for v in vectors {
        *freq.entry(v.len()).or_default() += 1;
    }
    freq.into_iter()
        .max_by_key(|&(len, n)| (n, len))
        .map_or(0, |(len, _)| len)
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model {0} not found")]
    NotFound(String),
    #[error("registry I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry file {path}: {message}")]
    Corrupt { path: String, message: String },
}

#[derive(Clone)]
struct Entry {
    descriptor: ModelDescriptor,
    model: Option<Arc<ForestModel>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    descriptor: ModelDescriptor,
    #[serde(default)]
    model: Option<ForestModel>,
}

/// Where training begins: a fresh job, or an existing model with the same id.
pub enum Begin {
    Started(ModelDescriptor),
    Existing(ModelDescriptor),
}

pub struct Registry {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, Entry>>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            entries: RwLock::new(HashMap::new()),
        }
    }

    /// Loads `dir/*.json`. Jobs that were still training when the process
    /// died are marked failed.
    pub fn open(dir: &Path) -> Result<Self, RegistryError> {
        fs::create_dir_all(dir)?;
        let mut entries = HashMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let corrupt = |message: String| RegistryError::Corrupt {
                path: path.display().to_string(),
                message,
            };
            let bytes = fs::read(&path)?;
            let file: ModelFile = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
            let mut descriptor = file.descriptor;
            if descriptor.status == ModelStatus::Ready && file.model.is_none() {
                return Err(corrupt("ready model without a forest".into()));
            }
            if descriptor.status == ModelStatus::Training {
                descriptor.status = ModelStatus::Failed;
                descriptor.error = Some("interrupted by service restart".into());
            }
            entries.insert(
                descriptor.model_id.clone(),
                Entry {
                    descriptor,
                    model: file.model.map(Arc::new),
                },
            );
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            entries: RwLock::new(entries),
        })
    }

    /// Registers a pending job unless a model with the same id is ready or
    /// training already. Failed models are retried.
    pub fn begin(&self, job: &TrainingJob, now: DateTime<Utc>) -> Result<Begin, RegistryError> {
        let mut entries = self.entries.write().expect("registry lock");
        if let Some(e) = entries.get(&job.model_id) {
            if e.descriptor.status != ModelStatus::Failed {
                return Ok(Begin::Existing(e.descriptor.clone()));
            }
        }
        let descriptor = job.pending_descriptor(now);
        self.persist(&descriptor, None)?;
        entries.insert(
            job.model_id.clone(),
            Entry {
                descriptor: descriptor.clone(),
                model: None,
            },
        );
        Ok(Begin::Started(descriptor))
    }

    /// Records the outcome of a job started with [`Registry::begin`].
    pub fn complete(
        &self,
        model_id: &str,
        outcome: Result<(ForestModel, etongue_core::LoocvReport), String>,
        now: DateTime<Utc>,
    ) -> Result<ModelDescriptor, RegistryError> {
        let mut descriptor = self
            .entries
            .read()
            .expect("registry lock")
            .get(model_id)
            .map(|e| e.descriptor.clone())
            .ok_or_else(|| RegistryError::NotFound(model_id.to_string()))?;
        descriptor.completed_at = Some(now);
        let model = match outcome {
            Ok((model, report)) => {
                descriptor.status = ModelStatus::Ready;
                descriptor.loocv_accuracy = Some(report.accuracy);
                descriptor.confusion_matrix = Some(report.confusion);
                Some(Arc::new(model))
            }
            Err(message) => {
                descriptor.status = ModelStatus::Failed;
                descriptor.error = Some(message);
                None
            }
        };
        // Persist first: a ready descriptor must never be visible before its file is durable.
        let persisted = self.persist(&descriptor, model.as_deref());
        if let Err(e) = persisted {
            descriptor.status = ModelStatus::Failed;
            descriptor.error = Some(format!("persisting model: {e}"));
            self.entries.write().expect("registry lock").insert(
                model_id.to_string(),
                Entry {
                    descriptor,
                    model: None,
                },
            );
            return Err(e);
        }
        self.entries.write().expect("registry lock").insert(
            model_id.to_string(),
            Entry {
                descriptor: descriptor.clone(),
                model,
            },
        );
        Ok(descriptor)
    }

    pub fn descriptor(&self, model_id: &str) -> Option<ModelDescriptor> {
        let entries = self.entries.read().expect("registry lock");
        entries.get(model_id).map(|e| e.descriptor.clone())
    }

    /// Descriptor plus the forest when it is ready.
    pub fn model(&self, model_id: &str) -> Option<(ModelDescriptor, Option<Arc<ForestModel>>)> {
        let entries = self.entries.read().expect("registry lock");
        entries
            .get(model_id)
            .map(|e| (e.descriptor.clone(), e.model.clone()))
    }

    /// All descriptors, oldest first.
    pub fn list(&self) -> Vec<ModelDescriptor> {
        let entries = self.entries.read().expect("registry lock");
        let mut out: Vec<_> = entries.values().map(|e| e.descriptor.clone()).collect();
        out.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.model_id.cmp(&b.model_id))
        });
        out
    }

    fn persist(
        &self,
        descriptor: &ModelDescriptor,
        model: Option<&ForestModel>,
    ) -> Result<(), RegistryError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        #[derive(Serialize)]
        struct Out<'a> {
            descriptor: &'a ModelDescriptor,
            model: Option<&'a ForestModel>,
        }
        let bytes = serde_json::to_vec(&Out { descriptor, model }).expect("model serializes");
        let path = dir.join(format!("{}.json", descriptor.model_id));
        let tmp = dir.join(format!(".{}.json.tmp", descriptor.model_id));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use etongue_core::ScenarioPack;

    fn stored(pack: &str, seed: u64) -> Vec<Arc<StoredRecord>> {
        ScenarioPack::builtin(pack)
            .unwrap()
            .simulate(seed)
            .unwrap()
            .into_iter()
            .map(|record| {
                Arc::new(StoredRecord {
                    received_at: Utc::now(),
                    offset: 0,
                    content_hash: String::new(),
                    record,
                })
            })
            .collect()
    }

    fn small() -> TrainRequest {
        TrainRequest {
            hyperparams: Some(Hyperparams {
                n_trees: 10,
                ..Hyperparams::default()
            }),
            ..TrainRequest::default()
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let records = stored("beverages", 1);
        let req = TrainRequest {
            label_filter: Some(vec!["A".into()]),
            ..small()
        };
        assert_eq!(
            TrainingJob::prepare(&records, &req).unwrap_err(),
            TrainingError::InsufficientClasses {
                found: vec!["A".into()]
            }
        );
    }

    #[test]
    fn short_record_is_named() {
        let mut records = stored("beverages", 1);
        let mut short = records[3].record.clone();
        short.frames.pop();
        let short_id = short.record_id;
        records[3] = Arc::new(StoredRecord {
            record: short,
            ..(*records[3]).clone()
        });
        match TrainingJob::prepare(&records, &small()).unwrap_err() {
            TrainingError::DimensionMismatch { expected, record_ids } => {
                assert_eq!(expected, 360);
                assert_eq!(record_ids, vec![short_id]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn singleton_class_in_two_class_set() {
        let records = stored("beverages", 1);
        let mut picked: Vec<_> = records
            .iter()
            .filter(|r| r.record.label.as_deref() == Some("A"))
            .cloned()
            .collect();
        let b = records
            .iter()
            .find(|r| r.record.label.as_deref() == Some("B"))
            .unwrap();
        picked.push(b.clone());
        assert!(matches!(
            TrainingJob::prepare(&picked, &small()),
            Err(TrainingError::DegenerateFold { .. })
        ));
    }

    #[test]
    fn model_id_is_stable_and_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let records = stored("beverages", 1);
        let job = TrainingJob::prepare(&records, &small()).unwrap();
        assert_eq!(
            job.model_id,
            TrainingJob::prepare(&records, &small()).unwrap().model_id
        );
        let reg = Registry::open(dir.path()).unwrap();
        assert!(matches!(reg.begin(&job, Utc::now()).unwrap(), Begin::Started(_)));
        assert!(matches!(reg.begin(&job, Utc::now()).unwrap(), Begin::Existing(_)));
        let d = reg
            .complete(&job.model_id, job.run().map_err(|e| e.to_string()), Utc::now())
            .unwrap();
        assert_eq!(d.status, ModelStatus::Ready);
        assert_eq!(d.confusion_matrix.as_ref().unwrap().total(), 21);

        let reopened = Registry::open(dir.path()).unwrap();
        let (desc, model) = reopened.model(&job.model_id).unwrap();
        assert_eq!(desc, d);
        assert_eq!(model.unwrap().trees.len(), 10);
    }

    #[test]
    fn interrupted_job_reopens_as_failed() {
        let dir = tempfile::tempdir().unwrap();
        let job = TrainingJob::prepare(&stored("beverages", 2), &small()).unwrap();
        Registry::open(dir.path())
            .unwrap()
            .begin(&job, Utc::now())
            .unwrap();
        let d = Registry::open(dir.path())
            .unwrap()
            .descriptor(&job.model_id)
            .unwrap();
        assert_eq!(d.status, ModelStatus::Failed);
    }
}
