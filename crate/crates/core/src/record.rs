//! Measurement records: the unit the edge produces, uploads and the service stores.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::ValidationError;
use crate::sensor::{AdcSpec, CHANNEL_COUNT};

/// Status bit: at least one channel clipped at the ADC code range.
pub const STATUS_SATURATED: u8 = 0b0000_0001;
/// Status bit: frame belongs to the sample phase (after immersion).
pub const STATUS_SAMPLE_PHASE: u8 = 0b0000_0010;

/// One simultaneous reading of the three difference channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AcquisitionFrame {
    pub seq: u32,
    /// Milliseconds since acquisition start.
    pub t_ms: u32,
    pub codes: [i16; CHANNEL_COUNT],
    pub status: u8,
}

impl AcquisitionFrame {
    pub fn is_sample_phase(&self) -> bool {
        self.status & STATUS_SAMPLE_PHASE != 0
    }

    pub fn is_saturated(&self) -> bool {
        self.status & STATUS_SATURATED != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub record_id: Uuid,
    pub device_id: String,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub location: Option<Location>,
    /// Index of the first sample-phase frame.
    pub immersion_index: u32,
    pub adc: AdcSpec,
    pub frames: Vec<AcquisitionFrame>,
    /// Class name; present on training data.
    #[serde(default)]
    pub label: Option<String>,
}

impl MeasurementRecord {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn baseline_frames(&self) -> &[AcquisitionFrame] {
        let split = (self.immersion_index as usize).min(self.frames.len());
        &self.frames[..split]
    }

    pub fn sample_frames(&self) -> &[AcquisitionFrame] {
        let split = (self.immersion_index as usize).min(self.frames.len());
        &self.frames[split..]
    }

    /// Checks every structural invariant; the error names the first offending field.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.device_id.trim().is_empty() {
            return Err(ValidationError::new("device_id", "must not be empty"));
        }
        if let Some(loc) = self.location {
            if !(-90.0..=90.0).contains(&loc.latitude) {
                return Err(ValidationError::new(
                    "location.latitude",
                    "must be within [-90, 90]",
                ));
            }
            if !(-180.0..=180.0).contains(&loc.longitude) {
                return Err(ValidationError::new(
                    "location.longitude",
                    "must be within [-180, 180]",
                ));
            }
        }
        if let Some(label) = &self.label {
            if label.trim().is_empty() {
                return Err(ValidationError::new("label", "must not be empty when present"));
            }
        }
        self.adc
            .validate()
            .map_err(|e| ValidationError::new("adc", e.to_string()))?;
        let n = self.frames.len();
        if self.immersion_index == 0 || self.immersion_index as usize >= n {
            return Err(ValidationError::new(
                "immersion_index",
                format!(
                    "must satisfy 0 < immersion_index < frame count ({n}), got {}",
                    self.immersion_index
                ),
            ));
        }
        let mut prev_t = 0u32;
        for (i, f) in self.frames.iter().enumerate() {
            if f.seq as usize != i {
                return Err(ValidationError::new(
                    format!("frames[{i}].seq"),
                    format!("expected {i}, got {}", f.seq),
                ));
            }
            if f.t_ms < prev_t {
                return Err(ValidationError::new(
                    format!("frames[{i}].t_ms"),
                    format!("decreases from {prev_t} to {}", f.t_ms),
                ));
            }
            prev_t = f.t_ms;
            let expect_sample = i >= self.immersion_index as usize;
            if f.is_sample_phase() != expect_sample {
                return Err(ValidationError::new(
                    format!("frames[{i}].status"),
                    format!(
                        "sample-phase bit must be {} relative to immersion_index {}",
                        if expect_sample { "set" } else { "clear" },
                        self.immersion_index
                    ),
                ));
            }
            if f.status & !(STATUS_SATURATED | STATUS_SAMPLE_PHASE) != 0 {
                return Err(ValidationError::new(
                    format!("frames[{i}].status"),
                    format!("reserved bits set in {:#04x}", f.status),
                ));
            }
        }
        Ok(())
    }

    /// Dequantized channel voltages of one frame, mV.
    pub fn frame_mv(&self, frame: &AcquisitionFrame) -> [f64; CHANNEL_COUNT] {
        frame.codes.map(|c| self.adc.dequantize(c))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn flat_record(baseline: u32, sample: u32, code: i16) -> MeasurementRecord {
        let frames = (0..baseline + sample)
            .map(|i| AcquisitionFrame {
                seq: i,
                t_ms: i * 500,
                codes: [code; 3],
                status: if i >= baseline { STATUS_SAMPLE_PHASE } else { 0 },
            })
            .collect();
        MeasurementRecord {
            record_id: Uuid::nil(),
            device_id: "test".into(),
            started_at: crate::sensor::simulation_epoch(),
            location: None,
            immersion_index: baseline,
            adc: AdcSpec::default(),
            frames,
            label: Some("A".into()),
        }
    }

    #[test]
    fn flat_record_is_valid() {
        flat_record(4, 6, 0).validate().unwrap();
    }

    #[test]
    fn immersion_index_bounds() {
        let mut r = flat_record(4, 6, 0);
        r.immersion_index = 0;
        assert_eq!(r.validate().unwrap_err().field, "immersion_index");
        r.immersion_index = 10;
        assert_eq!(r.validate().unwrap_err().field, "immersion_index");
    }

    #[test]
    fn phase_bits_must_match_immersion() {
        let mut r = flat_record(4, 6, 0);
        r.frames[2].status |= STATUS_SAMPLE_PHASE;
        assert_eq!(r.validate().unwrap_err().field, "frames[2].status");
        let mut r = flat_record(4, 6, 0);
        r.frames[7].status = 0;
        assert_eq!(r.validate().unwrap_err().field, "frames[7].status");
    }

    #[test]
    fn seq_and_time_order() {
        let mut r = flat_record(4, 6, 0);
        r.frames[3].seq = 9;
        assert_eq!(r.validate().unwrap_err().field, "frames[3].seq");
        let mut r = flat_record(4, 6, 0);
        r.frames[5].t_ms = 10;
        assert_eq!(r.validate().unwrap_err().field, "frames[5].t_ms");
    }

    #[test]
    fn json_shape() {
        let r = flat_record(1, 1, 16);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["immersion_index"], 1);
        assert_eq!(v["frames"][1]["codes"], serde_json::json!([16, 16, 16]));
        assert_eq!(v["frames"][1]["status"], 2);
        assert_eq!(v["adc"]["lsb"], 0.0625);
        assert_eq!(v["started_at"], "2019-01-01T00:00:00Z");
        let back: MeasurementRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
