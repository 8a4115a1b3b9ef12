//! Raw record -> feature vector.
//!
//! Three steps: subtract each channel's mean over the storage-solution
//! window, drop the storage-solution frames, concatenate the three channels.
//! The result is independent of any constant per-channel offset, which is what
//! makes a pseudo-reference electrode usable.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::PreprocessError;
use crate::record::MeasurementRecord;
use crate::sensor::CHANNEL_COUNT;

/// Within-channel index below which features belong to the early transient.
pub const EARLY_TRANSIENT_CUTOFF: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub record_id: Uuid,
    pub label: Option<String>,
    /// Channel 1 block, then channel 2, then channel 3; mV.
    pub values: Vec<f64>,
    pub n_sample_frames: usize,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of one channel (0-based).
    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.values[channel_block(self.n_sample_frames, channel)]
    }
}

/// Flat index range holding `channel` for vectors with `n_sample_frames` frames.
pub fn channel_block(n_sample_frames: usize, channel: usize) -> Range<usize> {
    channel * n_sample_frames..(channel + 1) * n_sample_frames
}

/// Flat indices whose within-channel position is below `cutoff`, i.e. the
/// first `cutoff` frames after immersion on every channel.
pub fn early_transient_indices(n_sample_frames: usize, cutoff: usize) -> Vec<usize> {
    let per_channel = cutoff.min(n_sample_frames);
    (0..CHANNEL_COUNT)
        .flat_map(|c| {
            let start = c * n_sample_frames;
            start..start + per_channel
        })
        .collect()
}

/// Exact per-channel sums of baseline codes and the window length.
fn baseline_code_sums(r: &MeasurementRecord) -> Result<([i64; CHANNEL_COUNT], usize), PreprocessError> {
    let window = r.baseline_frames();
    if window.is_empty() {
        return Err(PreprocessError::EmptyBaseline {
            record_id: r.record_id.to_string(),
        });
    }
    let mut sums = [0i64; CHANNEL_COUNT];
    for f in window {
        for (s, &c) in sums.iter_mut().zip(&f.codes) {
            *s += i64::from(c);
        }
    }
    Ok((sums, window.len()))
}

/// Mean dequantized voltage of each channel over the baseline window, mV.
pub fn baseline_stats(r: &MeasurementRecord) -> Result<[f64; CHANNEL_COUNT], PreprocessError> {
    let (sums, n) = baseline_code_sums(r)?;
    Ok(sums.map(|s| s as f64 * r.adc.lsb / n as f64))
}

/// Baseline-subtracted, concatenated sample-phase series.
///
/// Each value equals `code * lsb - baseline_mean`. It is computed as
/// `(n * code - sum) * lsb / n` with the numerator in exact integer
/// arithmetic, so constant per-channel code offsets cancel bit for bit.
pub fn preprocess(r: &MeasurementRecord) -> Result<FeatureVector, PreprocessError> {
    let (sums, n) = baseline_code_sums(r)?;
    let sample = r.sample_frames();
    if sample.is_empty() {
        return Err(PreprocessError::NoSampleFrames {
            record_id: r.record_id.to_string(),
        });
    }
    let n_i = n as i64;
    let scale = r.adc.lsb / n as f64;
    let mut values = Vec::with_capacity(CHANNEL_COUNT * sample.len());
    for (channel, &sum) in sums.iter().enumerate() {
        values.extend(
            sample
                .iter()
                .map(|f| (n_i * i64::from(f.codes[channel]) - sum) as f64 * scale),
        );
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite {
            record_id: r.record_id.to_string(),
        });
    }
    Ok(FeatureVector {
        record_id: r.record_id,
        label: r.label.clone(),
        values,
        n_sample_frames: sample.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::tests::flat_record;

    #[test]
    fn constant_baseline_mean() {
        let r = flat_record(4, 4, 16);
        assert_eq!(baseline_stats(&r).unwrap(), [1.0; 3]);
    }

    #[test]
    fn alternating_baseline_cancels() {
        let mut r = flat_record(6, 2, 0);
        for (i, f) in r.frames.iter_mut().take(6).enumerate() {
            f.codes = [if i % 2 == 0 { 16 } else { -16 }; 3];
        }
        assert_eq!(baseline_stats(&r).unwrap(), [0.0; 3]);
    }

    #[test]
    fn empty_baseline_is_an_error() {
        let mut r = flat_record(4, 4, 0);
        r.immersion_index = 0;
        assert!(matches!(
            baseline_stats(&r),
            Err(PreprocessError::EmptyBaseline { .. })
        ));
        assert!(preprocess(&r).is_err());
    }

    #[test]
    fn missing_sample_phase_is_an_error() {
        let mut r = flat_record(4, 4, 0);
        r.immersion_index = 8;
        assert!(matches!(
            preprocess(&r),
            Err(PreprocessError::NoSampleFrames { .. })
        ));
    }

    #[test]
    fn no_stimulus_gives_zero_vector() {
        let fv = preprocess(&flat_record(40, 120, 123)).unwrap();
        assert_eq!(fv.len(), 360);
        assert_eq!(fv.n_sample_frames, 120);
        assert!(fv.values.iter().all(|&v| v == 0.0));
        assert_eq!(fv.label.as_deref(), Some("A"));
    }

    #[test]
    fn channel_blocks_keep_frame_order() {
        let mut r = flat_record(2, 3, 0);
        for (i, f) in r.frames.iter_mut().enumerate() {
            f.codes = [i as i16 * 16, 100 + i as i16 * 16, -(i as i16) * 16];
        }
        let fv = preprocess(&r).unwrap();
        // Baseline means: 0.5, 100*lsb + 0.5, -0.5 mV.
        assert_eq!(fv.channel(0), &[1.5, 2.5, 3.5]);
        assert_eq!(fv.channel(1), &[1.5, 2.5, 3.5]);
        assert_eq!(fv.channel(2), &[-1.5, -2.5, -3.5]);
    }

    #[test]
    fn single_channel_offset_is_removed() {
        let mut r = flat_record(4, 6, 0);
        for (i, f) in r.frames.iter_mut().enumerate() {
            f.codes = [i as i16 * 3 - 7, 11 - i as i16, (i as i16 * 37) % 5];
        }
        let before = preprocess(&r).unwrap();
        for f in &mut r.frames {
            f.codes[1] += 80; // +5 mV
        }
        assert_eq!(preprocess(&r).unwrap(), before);
    }

    #[test]
    fn early_indices_cover_each_channel_head() {
        let idx = early_transient_indices(120, EARLY_TRANSIENT_CUTOFF);
        assert_eq!(idx.len(), 60);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[19], 19);
        assert_eq!(idx[20], 120);
        assert_eq!(idx[59], 259);
        assert_eq!(early_transient_indices(5, 20).len(), 15);
    }
}
