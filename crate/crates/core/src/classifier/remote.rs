//! Client for the HTTP/JSON scoring protocol.
//!
//! `POST /v1/score` takes the whole volume as base64 little-endian `f32`,
//! sequence axis first in the fixed `(T1w, T1wCE, T2w, FLAIR)` order.
//! `POST /v1/score_batch` is optional on the server; when it answers 404 or
//! 405 the client remembers that and scores items one by one.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{ClassifierScore, Oracle, OracleError};
use crate::scalar::Scalar;
use crate::volume::{MultiSequenceVolume, SequenceKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    #[serde(with = "millis")]
    pub timeout: Duration,
    /// Total attempts per request, including the first.
    pub attempts: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(120),
            attempts: 3,
            backoff_base: Duration::from_millis(100),
            max_in_flight: 4,
        }
    }
}

/// Body of `POST /v1/score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub dims: [usize; 4],
    pub order: String,
    pub dtype: String,
    pub encoding: String,
    pub data: String,
}

#[derive(Serialize)]
struct BatchRequest<'a> {
    items: &'a [ScoreRequest],
}

#[derive(Deserialize)]
struct ScoreResponse {
    probability: f64,
}

#[derive(Deserialize)]
struct BatchResponse {
    probabilities: Vec<f64>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Deserialize)]
struct HealthResponse {
    status: String,
    model: String,
}

/// Encodes a complete volume as a wire request.
pub fn encode_score_request<T: Scalar>(
    volume: &MultiSequenceVolume<T>,
) -> Result<ScoreRequest, OracleError> {
    volume
        .ensure_complete()
        .map_err(|e| OracleError::InvalidInput(e.to_string()))?;
    let d = volume.dims();
    let mut raw = Vec::with_capacity(4 * d.len() * 4);
    for kind in SequenceKind::ALL {
        let seq = volume.get(kind).expect("complete volume");
        for v in seq.data() {
            raw.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(ScoreRequest {
        dims: [4, d.depth, d.height, d.width],
        order: "seq,z,y,x".into(),
        dtype: "f32le".into(),
        encoding: "base64".into(),
        data: base64::engine::general_purpose::STANDARD.encode(raw),
    })
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteOracle {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
    batch_unsupported: AtomicBool,
}

impl RemoteOracle {
    pub fn new(config: RemoteConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build();
        RemoteOracle {
            gate: Gate::new(config.max_in_flight),
            agent: ureq::Agent::new_with_config(agent_config),
            config,
            batch_unsupported: AtomicBool::new(false),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    /// `GET /v1/health`; returns the served model identity.
    pub fn health(&self) -> Result<String, OracleError> {
        let (code, body) = self.with_retry(|| {
            let resp = self.agent.get(&self.url("/v1/health")).call();
            read_response(resp)
        })?;
        if code != 200 {
            return Err(status_error(code, &body));
        }
        let h: HealthResponse =
            serde_json::from_str(&body).map_err(|e| OracleError::Malformed(e.to_string()))?;
        if h.status != "ok" {
            return Err(OracleError::Malformed(format!("health status {:?}", h.status)));
        }
        Ok(h.model)
    }

    fn post_json(&self, path: &str, body: &[u8]) -> Result<(u16, String), OracleError> {
        let url = self.url(path);
        self.with_retry(|| {
            let resp = self
                .agent
                .post(&url)
                .header("Content-Type", "application/json")
                .send(body);
            read_response(resp)
        })
    }

    fn with_retry<R>(
        &self,
        mut op: impl FnMut() -> Result<R, OracleError>,
    ) -> Result<R, OracleError> {
        let attempts = self.config.attempts.max(1);
        let mut attempt = 0;
        loop {
            let _permit = self.gate.acquire();
            let result = op();
            drop(_permit);
            match result {
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let wait = self.config.backoff_base * 2u32.pow(attempt);
                    warn!("attempt {} failed ({e}); retrying in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn score_encoded(&self, body: &[u8]) -> Result<ClassifierScore, OracleError> {
        let (code, text) = self.post_json("/v1/score", body)?;
        if code != 200 {
            return Err(status_error(code, &text));
        }
        let r: ScoreResponse =
            serde_json::from_str(&text).map_err(|e| OracleError::Malformed(e.to_string()))?;
        ClassifierScore::new(r.probability)
    }

    fn try_batch(&self, items: &[ScoreRequest]) -> Option<Vec<Result<ClassifierScore, OracleError>>> {
        let body = serde_json::to_vec(&BatchRequest { items }).ok()?;
        match self.post_json("/v1/score_batch", &body) {
            Ok((200, text)) => match serde_json::from_str::<BatchResponse>(&text) {
                Ok(r) if r.probabilities.len() == items.len() => {
                    Some(r.probabilities.into_iter().map(ClassifierScore::new).collect())
                }
                _ => {
                    debug!("batch response malformed; scoring items individually");
                    None
                }
            },
            Ok((404 | 405, _)) => {
                self.batch_unsupported.store(true, Ordering::Relaxed);
                None
            }
            Ok((code, _)) => {
                debug!("batch endpoint answered {code}; scoring items individually");
                None
            }
            Err(e) => {
                debug!("batch request failed ({e}); scoring items individually");
                None
            }
        }
    }
}

fn status_error(code: u16, body: &str) -> OracleError {
    let message = serde_json::from_str::<ErrorBody>(body)
        .map(|b| b.error)
        .unwrap_or_else(|_| body.chars().take(200).collect());
    OracleError::Status { code, message }
}

fn read_response(
    resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
) -> Result<(u16, String), OracleError> {
    let mut resp = resp.map_err(classify)?;
    let code = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(64 * 1024 * 1024)
        .read_to_string()
        .map_err(classify)?;
    Ok((code, text))
}

fn classify(e: ureq::Error) -> OracleError {
    match e {
        ureq::Error::Timeout(t) => OracleError::Timeout(t.to_string()),
        ureq::Error::Io(io) => match io.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => {
                OracleError::Timeout(io.to_string())
            }
            _ => OracleError::Connection(io.to_string()),
        },
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            OracleError::Connection(e.to_string())
        }
        other => OracleError::Malformed(other.to_string()),
    }
}

impl<T: Scalar> Oracle<T> for RemoteOracle {
    fn score(&self, volume: &MultiSequenceVolume<T>) -> Result<ClassifierScore, OracleError> {
        let req = encode_score_request(volume)?;
        let body = serde_json::to_vec(&req).map_err(|e| OracleError::InvalidInput(e.to_string()))?;
        self.score_encoded(&body)
    }

    fn score_batch(
        &self,
        volumes: &[MultiSequenceVolume<T>],
    ) -> Vec<Result<ClassifierScore, OracleError>> {
        if volumes.is_empty() {
            return Vec::new();
        }
        let encoded: Vec<Result<ScoreRequest, OracleError>> =
            volumes.iter().map(encode_score_request).collect();
        if !self.batch_unsupported.load(Ordering::Relaxed) && encoded.iter().all(Result::is_ok) {
            let items: Vec<ScoreRequest> = encoded.iter().flatten().cloned().collect();
            if let Some(out) = self.try_batch(&items) {
                return out;
            }
        }
        encoded
            .into_iter()
            .map(|req| {
                let req = req?;
                let body =
                    serde_json::to_vec(&req).map_err(|e| OracleError::InvalidInput(e.to_string()))?;
                self.score_encoded(&body)
            })
            .collect()
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }

    fn identity(&self) -> String {
        format!("remote({})", self.config.endpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, ScalarVolume};

    #[test]
    fn request_layout() {
        let dims = Dims::new(1, 1, 2);
        let mv = MultiSequenceVolume::new(SequenceKind::ALL.map(|k| {
            let base = k.index() as f32;
            (k, ScalarVolume::new(dims, vec![base, base + 0.5]).unwrap())
        }))
        .unwrap();
        let req = encode_score_request(&mv).unwrap();
        assert_eq!(req.dims, [4, 1, 1, 2]);
        let raw = base64::engine::general_purpose::STANDARD.decode(&req.data).unwrap();
        let floats: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(floats, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);
        let json = serde_json::to_string(&req).unwrap();
        assert!(json.starts_with(r#"{"dims":[4,1,1,2],"order":"seq,z,y,x","dtype":"f32le","encoding":"base64","data":"#));
    }

    #[test]
    fn incomplete_volume_rejected_before_sending() {
        let mv = MultiSequenceVolume::new([(SequenceKind::T2w, ScalarVolume::filled(Dims::cube(1), 0.0f32))])
            .unwrap();
        assert!(matches!(encode_score_request(&mv), Err(OracleError::InvalidInput(_))));
    }

    #[test]
    fn unreachable_endpoint_is_connection_error() {
        let mut cfg = RemoteConfig::new("http://127.0.0.1:9");
        cfg.backoff_base = Duration::from_millis(1);
        let o = RemoteOracle::new(cfg);
        let err = o.health().unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }
}
