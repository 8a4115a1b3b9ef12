//! Edge agent: runs the acquisition state machine against a frame source,
//! stamps the record, and uploads it with retry.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::Deserialize;
use uuid::Uuid;

use crate::error::{AcquisitionError, UploadError};
use crate::record::{AcquisitionFrame, Location, MeasurementRecord, STATUS_SAMPLE_PHASE, STATUS_SATURATED};
use crate::sensor::{AdcSpec, CHANNEL_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Array sits in the storage solution.
    Baseline,
    /// Array is immersed in the sample.
    Sample,
}

/// What the agent tells the source about the frame it wants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameContext {
    pub index: u32,
    /// Seconds since acquisition start.
    pub t_s: f64,
    pub phase: Phase,
    /// Seconds since immersion; zero during the baseline phase.
    pub since_immersion_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawSample {
    pub codes: [i16; CHANNEL_COUNT],
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceError(pub String);

impl std::fmt::Display for SourceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SourceError {}

/// Anything that yields digitized three-channel samples: the simulator today,
/// a serial-attached board tomorrow.
pub trait FrameSource {
    fn sample_rate(&self) -> f64;
    fn read(&mut self, ctx: &FrameContext) -> Result<RawSample, SourceError>;
}

pub trait Clock {
    fn now(&self) -> DateTime<Utc>;
    fn sleep(&mut self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&mut self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock: `sleep` advances time instantly.
#[derive(Debug, Clone)]
pub struct FixedClock {
    now: DateTime<Utc>,
    slept: Duration,
}

impl FixedClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: start,
            slept: Duration::ZERO,
        }
    }

    /// Total time requested through `sleep`.
    pub fn slept(&self) -> Duration {
        self.slept
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.now
    }

    fn sleep(&mut self, d: Duration) {
        self.slept += d;
        self.now += chrono::Duration::from_std(d).unwrap_or_default();
    }
}

/// Cooperative cancellation, polled once per frame.
pub trait StopSignal {
    fn should_stop(&self) -> bool;
}

pub struct NeverStop;

impl StopSignal for NeverStop {
    fn should_stop(&self) -> bool {
        false
    }
}

impl StopSignal for AtomicBool {
    fn should_stop(&self) -> bool {
        self.load(Ordering::Relaxed)
    }
}

/// Parameters of one acquisition run.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionPlan {
    pub record_id: Uuid,
    pub device_id: String,
    pub baseline_s: f64,
    pub sample_s: f64,
    /// Wall-clock pacing factor: 1.0 is real time, 0.0 runs as fast as possible.
    pub time_scale: f64,
    pub label: Option<String>,
    pub location: Option<Location>,
    pub adc: AdcSpec,
}

impl AcquisitionPlan {
    fn frames_for(&self, seconds: f64, rate: f64) -> u32 {
        (seconds * rate).round() as u32
    }

    /// (baseline frames, sample frames) at `rate`.
    pub fn frame_counts(&self, rate: f64) -> Result<(u32, u32), AcquisitionError> {
        if !(self.baseline_s > 0.0 && self.sample_s > 0.0) {
            return Err(AcquisitionError::InvalidPlan(format!(
                "durations must be > 0 (baseline {} s, sample {} s)",
                self.baseline_s, self.sample_s
            )));
        }
        if !(self.time_scale.is_finite() && self.time_scale >= 0.0) {
            return Err(AcquisitionError::InvalidPlan(format!(
                "time scale must be >= 0, got {}",
                self.time_scale
            )));
        }
        if !(rate.is_finite() && rate > 0.0) {
            return Err(AcquisitionError::InvalidPlan(format!(
                "sample rate must be > 0, got {rate}"
            )));
        }
        let baseline = self.frames_for(self.baseline_s, rate);
        let sample = self.frames_for(self.sample_s, rate);
        if baseline == 0 || sample == 0 {
            return Err(AcquisitionError::InvalidPlan(format!(
                "durations too short for {rate} Hz: {baseline} baseline and {sample} sample frames"
            )));
        }
        Ok((baseline, sample))
    }
}

/// Runs baseline then sample phase, one frame per sample period.
///
/// Frame timestamps are nominal (`index / rate`), so the record content does
/// not depend on `time_scale` or on scheduling jitter. `on_frame` sees every
/// frame as soon as it is read.
pub fn run_acquisition<S, C, F>(
    source: &mut S,
    plan: &AcquisitionPlan,
    clock: &mut C,
    stop: &(impl StopSignal + ?Sized),
    mut on_frame: F,
) -> Result<MeasurementRecord, AcquisitionError>
where
    S: FrameSource + ?Sized,
    C: Clock + ?Sized,
    F: FnMut(&AcquisitionFrame),
{
    let rate = source.sample_rate();
    let (n_baseline, n_sample) = plan.frame_counts(rate)?;
    let total = n_baseline + n_sample;
    let period = 1.0 / rate;
    let started_at = clock.now();
    let mut frames = Vec::with_capacity(total as usize);

    for index in 0..total {
        if stop.should_stop() {
            return Err(AcquisitionError::Stopped { frames });
        }
        let t_s = f64::from(index) * period;
        let (phase, since_immersion_s) = if index < n_baseline {
            (Phase::Baseline, 0.0)
        } else {
            (Phase::Sample, f64::from(index - n_baseline) * period)
        };
        let ctx = FrameContext {
            index,
            t_s,
            phase,
            since_immersion_s,
        };
        let sample = match source.read(&ctx) {
            Ok(s) => s,
            Err(e) => return Err(AcquisitionError::SourceFailed { frames, message: e.0 }),
        };
        let mut status = 0;
        if sample.saturated {
            status |= STATUS_SATURATED;
        }
        if phase == Phase::Sample {
            status |= STATUS_SAMPLE_PHASE;
        }
        let frame = AcquisitionFrame {
            seq: index,
            t_ms: (f64::from(index) * 1000.0 / rate).round() as u32,
            codes: sample.codes,
            status,
        };
        on_frame(&frame);
        frames.push(frame);
        if plan.time_scale > 0.0 {
            clock.sleep(Duration::from_secs_f64(period * plan.time_scale));
        }
    }

    Ok(MeasurementRecord {
        record_id: plan.record_id,
        device_id: plan.device_id.clone(),
        started_at,
        location: plan.location,
        immersion_index: n_baseline,
        adc: plan.adc,
        frames,
        label: plan.label.clone(),
    })
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
    /// Each delay is scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            max_attempts: 5,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1 = after the first failed attempt).
    pub fn delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * self.factor.powi(retry.saturating_sub(1) as i32);
        let jitter = self.jitter.clamp(0.0, 1.0);
        let scale = if jitter > 0.0 {
            rng.random_range(1.0 - jitter..=1.0 + jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64(nominal * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal HTTP seam so delivery logic can be tested with injected faults.
pub trait Transport {
    /// Connection-level failures are `Err`; any HTTP status is `Ok`.
    fn post_json(&self, url: &str, body: &str) -> Result<HttpResponse, String>;
}

/// Blocking HTTP/1.1 client.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }

    pub fn get(&self, url: &str) -> Result<HttpResponse, String> {
        let mut resp = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &str) -> Result<HttpResponse, String> {
        let mut resp = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadReceipt {
    pub record_id: Uuid,
    pub attempts: u32,
    /// Server already held this record.
    pub duplicate: bool,
}

#[derive(Deserialize)]
struct IngestAck {
    record_id: Uuid,
}

/// Joins a service base URL with an API path.
pub fn endpoint_url(endpoint: &str, path: &str) -> String {
    format!("{}{}", endpoint.trim_end_matches('/'), path)
}

/// At-least-once delivery of `record` to `POST {endpoint}/v1/measurements`.
///
/// Transport failures and 5xx responses are retried with backoff; 4xx
/// responses end the upload immediately. The server deduplicates by record id,
/// so a retry after a lost acknowledgement is harmless.
pub fn upload_with<T, R>(
    record: &MeasurementRecord,
    endpoint: &str,
    policy: &RetryPolicy,
    transport: &T,
    sleep: &mut dyn FnMut(Duration),
    rng: &mut R,
) -> Result<UploadReceipt, UploadError>
where
    T: Transport + ?Sized,
    R: Rng + ?Sized,
{
    let url = endpoint_url(endpoint, "/v1/measurements");
    let body = serde_json::to_string(record).map_err(|e| UploadError::BadResponse(e.to_string()))?;
    let max_attempts = policy.max_attempts.max(1);
    let mut last_error = String::new();

    for attempt in 1..=max_attempts {
        if attempt > 1 {
            let delay = policy.delay(attempt - 1, rng);
            log::info!("upload {}: retry {attempt} after {delay:?}", record.record_id);
            sleep(delay);
        }
        match transport.post_json(&url, &body) {
            Ok(resp) if resp.status == 200 || resp.status == 201 => {
                let ack: IngestAck = serde_json::from_str(&resp.body)
                    .map_err(|e| UploadError::BadResponse(format!("{e}: {}", resp.body)))?;
                if ack.record_id != record.record_id {
                    return Err(UploadError::BadResponse(format!(
                        "receipt names {} instead of {}",
                        ack.record_id, record.record_id
                    )));
                }
                log::info!("upload {}: stored after {attempt} attempt(s)", record.record_id);
                return Ok(UploadReceipt {
                    record_id: ack.record_id,
                    attempts: attempt,
                    duplicate: resp.status == 200,
                });
            }
            Ok(resp) if (400..500).contains(&resp.status) => {
                return Err(UploadError::Rejected {
                    status: resp.status,
                    message: resp.body,
                });
            }
            Ok(resp) => {
                last_error = format!("HTTP {}: {}", resp.status, resp.body);
            }
            Err(e) => last_error = e,
        }
        log::warn!(
            "upload {}: attempt {attempt}/{max_attempts} failed: {last_error}",
            record.record_id
        );
    }
    Err(UploadError::Exhausted {
        attempts: max_attempts,
        last_error,
    })
}

/// [`upload_with`] over HTTP with real sleeps.
pub fn upload(
    record: &MeasurementRecord,
    endpoint: &str,
    policy: &RetryPolicy,
) -> Result<UploadReceipt, UploadError> {
    let transport = HttpTransport::default();
    let mut rng = rand::rng();
    upload_with(
        record,
        endpoint,
        policy,
        &transport,
        &mut std::thread::sleep,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::{Cell, RefCell};

    struct Ramp {
        fail_at: Option<u32>,
    }

    impl FrameSource for Ramp {
        fn sample_rate(&self) -> f64 {
            2.0
        }

        fn read(&mut self, ctx: &FrameContext) -> Result<RawSample, SourceError> {
            if Some(ctx.index) == self.fail_at {
                return Err(SourceError("link lost".into()));
            }
            let c = ctx.index as i16;
            Ok(RawSample {
                codes: [c, -c, 0],
                saturated: false,
            })
        }
    }

    fn plan() -> AcquisitionPlan {
        AcquisitionPlan {
            record_id: Uuid::from_u128(42),
            device_id: "bench-1".into(),
            baseline_s: 20.0,
            sample_s: 60.0,
            time_scale: 0.0,
            label: None,
            location: None,
            adc: AdcSpec::default(),
        }
    }

    fn run(
        p: &AcquisitionPlan,
        fail_at: Option<u32>,
    ) -> (Result<MeasurementRecord, AcquisitionError>, FixedClock) {
        let mut clock = FixedClock::new(crate::sensor::simulation_epoch());
        let r = run_acquisition(&mut Ramp { fail_at }, p, &mut clock, &NeverStop, |_| {});
        (r, clock)
    }

    #[test]
    fn default_durations_give_160_frames() {
        let (r, clock) = run(&plan(), None);
        let r = r.unwrap();
        assert_eq!(r.frames.len(), 160);
        assert_eq!(r.immersion_index, 40);
        assert_eq!(r.frames[159].t_ms, 79_500);
        assert_eq!(clock.slept(), Duration::ZERO);
        r.validate().unwrap();
    }

    #[test]
    fn pacing_does_not_change_content() {
        let (fast, _) = run(&plan(), None);
        let mut paced = plan();
        paced.time_scale = 1.0;
        let (slow, clock) = run(&paced, None);
        assert_eq!(fast.unwrap(), slow.unwrap());
        assert_eq!(clock.slept().as_secs_f64().round(), 80.0);
    }

    #[test]
    fn source_failure_exposes_partial_frames() {
        let (r, _) = run(&plan(), Some(10));
        let err = r.unwrap_err();
        assert!(matches!(err, AcquisitionError::SourceFailed { .. }));
        assert_eq!(err.partial_frames().len(), 10);
        assert_eq!(err.partial_frames()[9].seq, 9);
    }

    #[test]
    fn stop_signal_ends_run() {
        let stop = AtomicBool::new(false);
        let mut clock = FixedClock::new(crate::sensor::simulation_epoch());
        let mut seen = 0;
        let err = run_acquisition(&mut Ramp { fail_at: None }, &plan(), &mut clock, &stop, |_| {
            seen += 1;
            if seen == 5 {
                stop.store(true, Ordering::Relaxed);
            }
        })
        .unwrap_err();
        assert!(matches!(err, AcquisitionError::Stopped { ref frames } if frames.len() == 5));
    }

    #[test]
    fn rejects_bad_plans() {
        let mut p = plan();
        p.baseline_s = 0.0;
        assert!(matches!(run(&p, None).0, Err(AcquisitionError::InvalidPlan(_))));
        let mut p = plan();
        p.sample_s = 0.1;
        assert!(matches!(run(&p, None).0, Err(AcquisitionError::InvalidPlan(_))));
    }

    /// Fails with a connection error for the first `down_for` calls.
    struct Flaky {
        down_for: u32,
        calls: Cell<u32>,
        status: u16,
    }

    impl Transport for Flaky {
        fn post_json(&self, _url: &str, body: &str) -> Result<HttpResponse, String> {
            let n = self.calls.get() + 1;
            self.calls.set(n);
            if n <= self.down_for {
                return Err("connection refused".into());
            }
            let r: MeasurementRecord = serde_json::from_str(body).unwrap();
            Ok(HttpResponse {
                status: self.status,
                body: format!(r#"{{"record_id":"{}"}}"#, r.record_id),
            })
        }
    }

    fn record() -> MeasurementRecord {
        run(&plan(), None).0.unwrap()
    }

    #[test]
    fn retries_until_server_recovers() {
        let t = Flaky {
            down_for: 2,
            calls: Cell::new(0),
            status: 201,
        };
        let delays = RefCell::new(Vec::new());
        let mut rng = crate::seeded_rng(3);
        let receipt = upload_with(
            &record(),
            "http://edge.invalid/",
            &RetryPolicy::default(),
            &t,
            &mut |d| delays.borrow_mut().push(d),
            &mut rng,
        )
        .unwrap();
        assert_eq!(receipt.attempts, 3);
        assert_eq!(receipt.record_id, Uuid::from_u128(42));
        assert!(!receipt.duplicate);
        let delays = delays.into_inner();
        assert_eq!(delays.len(), 2);
        assert!((0.4..=0.6).contains(&delays[0].as_secs_f64()));
        assert!((0.8..=1.2).contains(&delays[1].as_secs_f64()));
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let t = Flaky {
            down_for: u32::MAX,
            calls: Cell::new(0),
            status: 201,
        };
        let mut rng = crate::seeded_rng(3);
        let err = upload_with(
            &record(),
            "http://x",
            &RetryPolicy::default(),
            &t,
            &mut |_| {},
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, UploadError::Exhausted { attempts: 5, .. }));
        assert_eq!(t.calls.get(), 5);
    }

    struct Reject(Cell<u32>);

    impl Transport for Reject {
        fn post_json(&self, _url: &str, _body: &str) -> Result<HttpResponse, String> {
            self.0.set(self.0.get() + 1);
            Ok(HttpResponse {
                status: 400,
                body: r#"{"error":"immersion_index: out of range"}"#.into(),
            })
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Reject(Cell::new(0));
        let mut bad = record();
        bad.immersion_index = 0;
        let mut rng = crate::seeded_rng(3);
        let err = upload_with(
            &bad,
            "http://x",
            &RetryPolicy::default(),
            &t,
            &mut |_| {},
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, UploadError::Rejected { status: 400, .. }));
        assert_eq!(t.0.get(), 1);
    }

    #[test]
    fn backoff_without_jitter_doubles() {
        let p = RetryPolicy {
            jitter: 0.0,
            ..RetryPolicy::default()
        };
        let mut rng = crate::seeded_rng(0);
        let d: Vec<f64> = (1..=4).map(|k| p.delay(k, &mut rng).as_secs_f64()).collect();
        assert_eq!(d, vec![0.5, 1.0, 2.0, 4.0]);
    }
}
