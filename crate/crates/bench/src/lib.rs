//! Shared fixtures for the benchmarks.

use etongue_core::pipeline::pack_features;
use etongue_core::{FeatureVector, ScenarioPack};

/// Feature vectors of a built-in pack at a fixed seed.
pub fn features(pack: &str) -> Vec<FeatureVector> {
    pack_features(&ScenarioPack::builtin(pack).expect("built-in pack"), 0).expect("pack simulates")
}
