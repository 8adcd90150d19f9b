//! HTTP/JSON client for an external logit server.
//!
//! ```text
//! GET  /v1/handshake -> {"vocab_size": int, "model_id": string}
//! POST /v1/logits    {"demonstrations": [{"payload": ..}], "query": {"payload": ..},
//!                     "partial_output": [int]}
//!                 -> {"logits": [number], "token_count": int}
//! ```
//!
//! Floats are written in shortest round-trip form.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Concurrency, ContextRequest, LogitProvider};
use crate::domain::{Payload, Vocabulary};
use crate::error::{Error, Result};
use crate::numeric::LogitVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub vocab_size: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDemonstration {
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub demonstrations: Vec<WireDemonstration>,
    pub query: WireQuery,
    pub partial_output: Vec<usize>,
}

impl LogitsRequest {
    pub fn from_context(request: &ContextRequest<'_, f64>) -> Self {
        Self {
            demonstrations: request
                .demonstrations
                .iter()
                .map(|d| WireDemonstration {
                    payload: d.payload.clone(),
                })
                .collect(),
            query: WireQuery {
                payload: request.query.payload.clone(),
            },
            partial_output: request.partial_output.iter().map(|t| t.0).collect(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
    pub token_count: usize,
}

#[derive(Deserialize)]
struct RawLogitsResponse {
    logits: Vec<Option<f64>>,
    token_count: usize,
}

impl LogitsResponse {
    /// Parses a response body. Malformed JSON and non-finite logits are
    /// protocol errors.
    pub fn parse(body: &[u8]) -> Result<Self> {
        let raw: RawLogitsResponse =
            serde_json::from_slice(body).map_err(|e| Error::Protocol(format!("malformed logits response: {e}")))?;
        let logits = raw
            .logits
            .into_iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Protocol(format!("logit {i} is not finite"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            logits,
            token_count: raw.token_count,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    /// Extra attempts for retryable failures.
    pub max_retries: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".into(),
            timeout_secs: 60.0,
            max_in_flight: 4,
            max_retries: 2,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
        out
    }
}

pub struct RemoteClient {
    agent: ureq::Agent,
    base: String,
    handshake: Handshake,
    vocabulary: Vocabulary,
    gate: Gate,
    max_retries: usize,
    token_counts: Mutex<HashMap<Vec<u8>, usize>>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("base", &self.base)
            .field("handshake", &self.handshake)
            .finish_non_exhaustive()
    }
}

fn transport(e: ureq::Error) -> Error {
    Error::Backend {
        retryable: true,
        message: e.to_string(),
    }
}

impl RemoteClient {
    /// Connects and performs the handshake.
    pub fn connect(cfg: &RemoteConfig) -> Result<Self> {
        if cfg.timeout_secs.is_nan() || cfg.timeout_secs <= 0.0 {
            return Err(Error::Config("remote timeout must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = cfg.endpoint.trim_end_matches('/').to_string();
        let mut client = Self {
            agent,
            base,
            handshake: Handshake {
                vocab_size: 0,
                model_id: String::new(),
            },
            vocabulary: Vocabulary::new(2)?,
            gate: Gate::new(cfg.max_in_flight),
            max_retries: cfg.max_retries,
            token_counts: Mutex::new(HashMap::new()),
        };
        let body = client.with_retries(|| client.get("/v1/handshake"))?;
        let handshake: Handshake =
            serde_json::from_slice(&body).map_err(|e| Error::Protocol(format!("malformed handshake: {e}")))?;
        client.vocabulary =
            Vocabulary::new(handshake.vocab_size).map_err(|e| Error::Protocol(format!("handshake vocabulary: {e}")))?;
        client.handshake = handshake;
        Ok(client)
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn get(&self, path: &str) -> Result<Vec<u8>> {
        let resp = self
            .agent
            .get(&format!("{}{path}", self.base))
            .call()
            .map_err(transport)?;
        Self::body(resp)
    }

    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>> {
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body)
            .map_err(transport)?;
        Self::body(resp)
    }

    fn body(mut resp: ureq::http::Response<ureq::Body>) -> Result<Vec<u8>> {
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(transport)?;
        match status {
            200..=299 => Ok(body),
            429 | 500..=599 => Err(Error::Backend {
                retryable: true,
                message: format!("server returned HTTP {status}"),
            }),
            _ => Err(Error::Backend {
                retryable: false,
                message: format!(
                    "server rejected request with HTTP {status}: {}",
                    String::from_utf8_lossy(&body)
                ),
            }),
        }
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(Error::Backend { retryable: true, .. }) if attempt < self.max_retries => {
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Sends one logits request and validates the response.
    pub fn request_logits(&self, request: &LogitsRequest) -> Result<LogitsResponse> {
        let body = request.to_json();
        let raw = self.gate.run(|| self.with_retries(|| self.post("/v1/logits", &body)))?;
        let resp = LogitsResponse::parse(&raw)?;
        if resp.logits.len() != self.handshake.vocab_size {
            return Err(Error::Protocol(format!(
                "response carries {} logits, handshake promised {}",
                resp.logits.len(),
                self.handshake.vocab_size
            )));
        }
        self.token_counts.lock().unwrap().insert(body, resp.token_count);
        Ok(resp)
    }
}

impl LogitProvider<f64> for RemoteClient {
    fn score(&self, request: &ContextRequest<'_, f64>) -> Result<LogitVector<f64>> {
        let resp = self.request_logits(&LogitsRequest::from_context(request))?;
        LogitVector::new(resp.logits).map_err(|e| Error::Protocol(e.to_string()))
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    /// Served from the responses already seen; otherwise costs one request.
    fn token_count(&self, request: &ContextRequest<'_, f64>) -> Result<usize> {
        let wire = LogitsRequest::from_context(request);
        if let Some(n) = self.token_counts.lock().unwrap().get(&wire.to_json()) {
            return Ok(*n);
        }
        Ok(self.request_logits(&wire)?.token_count)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_rejects_null_and_malformed() {
        assert!(LogitsResponse::parse(br#"{"logits":[0.0,1.5],"token_count":3}"#).is_ok());
        let e = LogitsResponse::parse(br#"{"logits":[0.0,null],"token_count":3}"#).unwrap_err();
        assert!(e.is_protocol());
        let e = LogitsResponse::parse(br#"{"logits":[0.0,1e999],"token_count":3}"#).unwrap_err();
        assert!(e.is_protocol());
        assert!(LogitsResponse::parse(b"not json").unwrap_err().is_protocol());
    }

    #[test]
    fn floats_round_trip_shortest() {
        let r = LogitsResponse {
            logits: vec![0.1, -2.5e-300, 1.0 / 3.0, 123456.789],
            token_count: 7,
        };
        let text = String::from_utf8(r.to_json()).unwrap();
        assert_eq!(
            text,
            r#"{"logits":[0.1,-2.5e-300,0.3333333333333333,123456.789],"token_count":7}"#
        );
        assert_eq!(LogitsResponse::parse(text.as_bytes()).unwrap(), r);
    }
}
