use thiserror::Error;

use crate::record::AcquisitionFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("unknown ion identifier {0:?}")]
    UnknownIon(String),
    #[error("invalid ion {ion:?}: {reason}")]
    InvalidIon { ion: String, reason: String },
    #[error("invalid sensor configuration: {0}")]
    InvalidSpec(String),
    #[error("electrode {electrode}: log argument {argument} is not positive (unmodelable dilution)")]
    UnmodelableDilution { electrode: u8, argument: f64 },
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame must be exactly {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("unsupported frame version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("CRC mismatch: frame carries {carried:#04x}, computed {computed:#04x}")]
    CrcMismatch { carried: u8, computed: u8 },
}

/// A record that violates its structural invariants.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {reason}")]
pub struct ValidationError {
    /// Dotted path of the offending field, e.g. `frames[3].seq`.
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("invalid acquisition plan: {0}")]
    InvalidPlan(String),
    #[error("frame source failed after {} frames: {message}", frames.len())]
    SourceFailed {
        /// Frames collected before the failure.
        frames: Vec<AcquisitionFrame>,
        message: String,
    },
    #[error("acquisition stopped after {} frames", frames.len())]
    Stopped { frames: Vec<AcquisitionFrame> },
}

impl AcquisitionError {
    /// Frames collected before the run ended, if any.
    pub fn partial_frames(&self) -> &[AcquisitionFrame] {
        match self {
            AcquisitionError::SourceFailed { frames, .. } | AcquisitionError::Stopped { frames } => frames,
            AcquisitionError::InvalidPlan(_) => &[],
        }
    }
}

#[derive(Debug, Error)]
pub enum UploadError {
    #[error("server rejected record ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("upload failed after {attempts} attempts: {last_error}")]
    Exhausted { attempts: u32, last_error: String },
    #[error("malformed server response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("record {record_id}: empty baseline window")]
    EmptyBaseline { record_id: String },
    #[error("record {record_id}: no sample-phase frames")]
    NoSampleFrames { record_id: String },
    #[error("record {record_id}: non-finite feature value")]
    NonFinite { record_id: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset needs at least 2 classes, found {0}")]
    SingleClass(usize),
    #[error("sample {record_id} is unlabeled")]
    Unlabeled { record_id: String },
    #[error("dimension mismatch: expected {expected} features, {record_id} has {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        record_id: String,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("LOOCV fold {fold} (holding out {record_id}) leaves a single-class training set")]
    DegenerateFold { fold: usize, record_id: String },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("unknown class {0:?}")]
    UnknownClass(String),
}

/// Failure anywhere in the offline simulate → preprocess → forest pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}
