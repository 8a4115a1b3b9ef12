//! Software twin of a portable potentiometric electronic tongue.
//!
//! * [`sensor`]: four-electrode array and ADC simulator
//! * [`frame`]: binary frame codec for the device link
//! * [`edge`]: acquisition state machine and upload with retry
//! * [`preprocess`]: baseline subtraction and channel concatenation
//! * [`forest`]: random forest, proximity, LOOCV, confusion matrices
//! * [`pipeline`]: offline evaluation of a scenario pack
//! * [`scenario`]: scenario files and the built-in scenario packs

pub mod edge;
pub mod error;
pub mod forest;
pub mod frame;
pub mod ion;
pub mod pipeline;
pub mod preprocess;
pub mod published;
pub mod record;
pub mod scenario;
pub mod sensor;

use rand::{RngCore, SeedableRng};
use uuid::Uuid;

pub use error::{
    AcquisitionError, ForestError, FrameError, PipelineError, PreprocessError, ScenarioError, SensorError,
    UploadError, ValidationError,
};
pub use forest::{
    accuracy_from_confusion, loocv, train, ConfusionMatrix, ForestModel, Hyperparams, LoocvReport, Prediction,
};
pub use ion::IonComposition;
pub use preprocess::{baseline_stats, preprocess, FeatureVector};
pub use record::{AcquisitionFrame, MeasurementRecord};
pub use scenario::{Scenario, ScenarioPack};
pub use sensor::{AdcSpec, ArraySpec, ElectrodeSpec};

/// Rng used everywhere a seed must reproduce results across runs and platforms.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// SplitMix64 mix of `base` and `index`; used to derive child seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Version-4 UUID from the given rng.
pub fn random_uuid<R: RngCore + ?Sized>(rng: &mut R) -> Uuid {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}
