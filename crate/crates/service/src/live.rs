//! Service-relayed acquisitions and the live frame stream.
//!
//! `POST /v1/acquisitions` starts the edge agent against the simulator on a
//! worker thread, paced in wall-clock time. Every frame is published to the
//! session as a [`LiveStreamMessage`]; `GET /v1/stream` serves them as
//! server-sent events with the frame `seq` as event id, so a client that
//! reconnects with `Last-Event-ID` (or `after_seq`) resumes without gaps or
//! duplicates. A completed run is ingested into the store like any upload; a
//! stopped run is discarded.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use etongue_core::edge::{run_acquisition, AcquisitionPlan, SystemClock};
use etongue_core::record::AcquisitionFrame;
use etongue_core::sensor::scenario_source;
use etongue_core::{AcquisitionError, MeasurementRecord, Scenario, ScenarioPack};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use uuid::Uuid;

use crate::store::{IngestOutcome, RecordStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamPhase {
    Baseline,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveFrame {
    pub seq: u32,
    pub t_ms: u32,
    /// Dequantized channel voltages, mV.
    pub mv: [f64; 3],
}

/// One frame as pushed to live viewers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveStreamMessage {
    pub record_id: Uuid,
    pub frame: LiveFrame,
    pub phase: StreamPhase,
}

impl LiveStreamMessage {
    pub fn from_frame(record_id: Uuid, adc: &etongue_core::AdcSpec, f: &AcquisitionFrame) -> Self {
        Self {
            record_id,
            frame: LiveFrame {
                seq: f.seq,
                t_ms: f.t_ms,
                mv: f.codes.map(|c| adc.dequantize(c)),
            },
            phase: if f.is_sample_phase() {
                StreamPhase::Sample
            } else {
                StreamPhase::Baseline
            },
        }
    }

    pub fn from_record(r: &MeasurementRecord) -> Vec<Self> {
        r.frames
            .iter()
            .map(|f| Self::from_frame(r.record_id, &r.adc, f))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionState {
    Running,
    /// Record stored.
    Completed,
    /// Stopped by the operator; nothing stored.
    Discarded,
    Failed,
}

impl AcquisitionState {
    pub fn is_terminal(self) -> bool {
        self != AcquisitionState::Running
    }
}

fn default_time_scale() -> f64 {
    1.0
}

fn default_device() -> String {
    "edge-sim".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartAcquisition {
    pub scenario: String,
    /// Pack to look the scenario up in; every loaded pack when absent.
    #[serde(default)]
    pub pack: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    /// Selects the noise realization; same seed, same frames.
    #[serde(default)]
    pub seed: u64,
    /// 1.0 is real time, 0.0 runs without pacing.
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
    #[serde(default = "default_device")]
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionStatus {
    /// Equal to the record id of the measurement being acquired.
    pub acquisition_id: Uuid,
    pub status: AcquisitionState,
    pub pack: String,
    pub scenario: String,
    pub label: Option<String>,
    pub device_id: String,
    pub started_at: DateTime<Utc>,
    pub immersion_index: u32,
    pub total_frames: u32,
    pub frames_received: u32,
    pub error: Option<String>,
}

/// Terminal event payload of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEnd {
    pub record_id: Uuid,
    pub status: AcquisitionState,
    pub frames: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StartError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown scenario pack {0:?}")]
    UnknownPack(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

struct SessionState {
    messages: Vec<LiveStreamMessage>,
    status: AcquisitionStatus,
}

pub struct Session {
    id: Uuid,
    stop: AtomicBool,
    state: Mutex<SessionState>,
    version: watch::Sender<u64>,
}

impl Session {
    pub fn id(&self) -> Uuid {
        self.id
    }

    pub fn status(&self) -> AcquisitionStatus {
        self.state.lock().expect("session lock").status.clone()
    }

    /// Messages from index `from` on, plus the terminal status if the run has ended.
    pub fn read_from(&self, from: usize) -> (Vec<LiveStreamMessage>, Option<StreamEnd>) {
        let state = self.state.lock().expect("session lock");
        let msgs = state.messages.get(from..).unwrap_or_default().to_vec();
        let end = state.status.status.is_terminal().then(|| StreamEnd {
            record_id: self.id,
            status: state.status.status,
            frames: state.messages.len() as u32,
        });
        (msgs, end)
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    fn update(&self, f: impl FnOnce(&mut SessionState)) {
        f(&mut self.state.lock().expect("session lock"));
        self.version.send_modify(|v| *v += 1);
    }
}

/// Running and finished relay sessions, plus the packs they draw scenarios from.
pub struct LiveHub {
    packs: Vec<ScenarioPack>,
    sessions: Mutex<HashMap<Uuid, Arc<Session>>>,
}

impl LiveHub {
    pub fn new(packs: Vec<ScenarioPack>) -> Self {
        Self {
            packs,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn packs(&self) -> &[ScenarioPack] {
        &self.packs
    }

    pub fn session(&self, id: &Uuid) -> Option<Arc<Session>> {
        self.sessions.lock().expect("hub lock").get(id).cloned()
    }

    fn lookup(&self, req: &StartAcquisition) -> Result<(&ScenarioPack, &Scenario), StartError> {
        let candidates: Vec<&ScenarioPack> = match &req.pack {
            Some(name) => {
                let p = self
                    .packs
                    .iter()
                    .find(|p| &p.name == name)
                    .ok_or_else(|| StartError::UnknownPack(name.clone()))?;
                vec![p]
            }
            None => self.packs.iter().collect(),
        };
        candidates
            .into_iter()
            .find_map(|p| p.find(&req.scenario).map(|s| (p, s)))
            .ok_or_else(|| StartError::UnknownScenario(req.scenario.clone()))
    }

    /// Validates the request and starts the acquisition on a worker thread.
    pub fn start(
        &self,
        req: StartAcquisition,
        store: Arc<dyn RecordStore>,
    ) -> Result<Arc<Session>, StartError> {
        let invalid = |field: &str, reason: &str| StartError::Invalid {
            field: field.into(),
            reason: reason.into(),
        };
        if !(req.time_scale.is_finite() && req.time_scale >= 0.0) {
            return Err(invalid("time_scale", "must be a finite number >= 0"));
        }
        if req.device_id.trim().is_empty() {
            return Err(invalid("device_id", "must not be empty"));
        }
        if req.label.as_deref().is_some_and(|l| l.trim().is_empty()) {
            return Err(invalid("label", "must not be empty when present"));
        }
        let (pack, scenario) = self.lookup(&req)?;
        let scenario = scenario.replicate(req.seed, 0);
        let (_, mut source) = scenario_source(&pack.array, &pack.adc, &scenario)
            .map_err(|e| invalid("scenario", &e.to_string()))?;

        // Live runs carry wall-clock timestamps, so they get fresh ids rather
        // than the seed-derived id of an offline simulation.
        let record_id = Uuid::new_v4();
        let plan = AcquisitionPlan {
            record_id,
            device_id: req.device_id.clone(),
            baseline_s: scenario.baseline_duration,
            sample_s: scenario.sample_duration,
            time_scale: req.time_scale,
            label: req.label.clone(),
            location: None,
            adc: pack.adc,
        };
        let (n_baseline, n_sample) = plan
            .frame_counts(pack.adc.sample_rate)
            .map_err(|e| invalid("scenario", &e.to_string()))?;

        let session = Arc::new(Session {
            id: record_id,
            stop: AtomicBool::new(false),
            state: Mutex::new(SessionState {
                messages: Vec::with_capacity((n_baseline + n_sample) as usize),
                status: AcquisitionStatus {
                    acquisition_id: record_id,
                    status: AcquisitionState::Running,
                    pack: pack.name.clone(),
                    scenario: scenario.name.clone(),
                    label: req.label.clone(),
                    device_id: req.device_id.clone(),
                    started_at: Utc::now(),
                    immersion_index: n_baseline,
                    total_frames: n_baseline + n_sample,
                    frames_received: 0,
                    error: None,
                },
            }),
            version: watch::channel(0).0,
        });
        self.sessions
            .lock()
            .expect("hub lock")
            .insert(record_id, session.clone());

        let worker = session.clone();
        std::thread::Builder::new()
            .name(format!("acq-{record_id}"))
            .spawn(move || {
                let adc = plan.adc;
                let result = run_acquisition(&mut source, &plan, &mut SystemClock, &worker.stop, |f| {
                    let msg = LiveStreamMessage::from_frame(record_id, &adc, f);
                    worker.update(|s| {
                        s.messages.push(msg);
                        s.status.frames_received += 1;
                    });
                });
                let (state, error) = finish(result, store.as_ref());
                worker.update(|s| {
                    s.status.status = state;
                    s.status.error = error;
                });
            })
            .expect("spawn acquisition thread");
        Ok(session)
    }

    /// Requests a stop. Returns false when the run has already ended.
    pub fn stop(&self, id: &Uuid) -> Option<bool> {
        let session = self.session(id)?;
        if session.status().status.is_terminal() {
            return Some(false);
        }
        session.stop.store(true, Ordering::Relaxed);
        Some(true)
    }
}

fn finish(
    result: Result<MeasurementRecord, AcquisitionError>,
    store: &dyn RecordStore,
) -> (AcquisitionState, Option<String>) {
    match result {
        Ok(record) => match store.ingest(record, Utc::now()) {
            Ok(IngestOutcome::Created | IngestOutcome::Duplicate) => (AcquisitionState::Completed, None),
            Err(e) => (AcquisitionState::Failed, Some(e.to_string())),
        },
        Err(AcquisitionError::Stopped { .. }) => (AcquisitionState::Discarded, None),
        Err(e) => (AcquisitionState::Failed, Some(e.to_string())),
    }
}
