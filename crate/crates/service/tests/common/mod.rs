#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::time::{Duration, Instant};

use etongue_core::{MeasurementRecord, ScenarioPack};
use etongue_service::{spawn, ServerHandle, ServiceConfig};
use serde_json::Value;

pub fn server() -> ServerHandle {
    spawn(&ServiceConfig {
        addr: "127.0.0.1:0".parse().unwrap(),
        ..ServiceConfig::default()
    })
    .unwrap()
}

pub fn records(pack: &str, seed: u64) -> Vec<MeasurementRecord> {
    ScenarioPack::builtin(pack).unwrap().simulate(seed).unwrap()
}

pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(server: &ServerHandle) -> Self {
        Self::at(&server.url())
    }

    pub fn at(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.to_string(),
            agent,
        }
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> (u16, Value) {
        let mut resp = resp.unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        let value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        (status, value)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        Self::finish(self.agent.get(format!("{}{path}", self.base)).call())
    }

    pub fn delete(&self, path: &str) -> (u16, Value) {
        Self::finish(self.agent.delete(format!("{}{path}", self.base)).call())
    }

    pub fn post(&self, path: &str, body: &impl serde::Serialize) -> (u16, Value) {
        Self::finish(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    pub fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        Self::finish(
            self.agent
                .post(format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .send(body),
        )
    }

    /// Polls a model until it leaves the training state.
    pub fn wait_ready(&self, model_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let (status, d) = self.get(&format!("/v1/models/{model_id}"));
            assert_eq!(status, 200, "{d}");
            if d["status"] != "training" {
                return d;
            }
            assert!(Instant::now() < deadline, "training did not finish");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Opens an SSE stream and returns its events until `stop` says so or the stream ends.
    pub fn sse(
        &self,
        path: &str,
        last_event_id: Option<&str>,
        mut stop: impl FnMut(&SseEvent) -> bool,
    ) -> Vec<SseEvent> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(id) = last_event_id {
            req = req.header("last-event-id", id);
        }
        let resp = req.call().unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let reader = BufReader::new(resp.into_body().into_reader());
        let mut out = Vec::new();
        let mut current = SseEvent::default();
        for line in reader.lines() {
            let line = line.unwrap();
            if line.is_empty() {
                if current.event.is_empty() && current.data.is_empty() {
                    continue;
                }
                let ev = std::mem::take(&mut current);
                let halt = stop(&ev);
                out.push(ev);
                if halt {
                    break;
                }
            } else if let Some(v) = line.strip_prefix("event:") {
                current.event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("id:") {
                current.id = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                current.data.push_str(v.trim_start());
            }
        }
        out
    }
}

#[derive(Debug, Default, Clone)]
pub struct SseEvent {
    pub event: String,
    pub id: Option<String>,
    pub data: String,
}

impl SseEvent {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.data).unwrap()
    }
}
