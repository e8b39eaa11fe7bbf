use std::sync::atomic::{AtomicU64, Ordering};
use std::thread::sleep;
use std::time::Duration;

use serde::de::DeserializeOwned;

use super::wire::{ErrorResponse, InfoResponse, QueryRequest, QueryResponse};
use super::{validate_images, Oracle, OracleError, OracleMode, OracleResponse};
use crate::autodiff::Tensor;
use crate::models::ImageShape;
use crate::scalar::Real;

/// Response bodies above this size are refused.
const BODY_LIMIT: u64 = 1 << 30;

/// Attempts per request and the first backoff; each retry doubles it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

/// Client for a target served over HTTP.
pub struct RemoteOracle {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    classes: usize,
    shape: ImageShape,
    counter: AtomicU64,
}

enum Attempt<T> {
    Done(T),
    Retry(OracleError),
    Fail(OracleError),
}

impl RemoteOracle {
    /// Connects and reads `/v1/info`.
    pub fn connect(url: &str) -> Result<Self, OracleError> {
        Self::connect_with(url, RetryPolicy::default())
    }

    pub fn connect_with(url: &str, retry: RetryPolicy) -> Result<Self, OracleError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        let mut oracle = RemoteOracle {
            base: url.trim_end_matches('/').to_string(),
            agent,
            retry,
            classes: 0,
            shape: [0; 3],
            counter: AtomicU64::new(0),
        };
        let info = oracle.info()?;
        oracle.classes = info.classes;
        oracle.shape = info.shape;
        Ok(oracle)
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    /// Server-side metadata, including its own query count.
    pub fn info(&self) -> Result<InfoResponse, OracleError> {
        let url = format!("{}/v1/info", self.base);
        self.with_retries(&url, || self.agent.get(&url).call())
    }

    fn with_retries<T, F>(&self, url: &str, send: F) -> Result<T, OracleError>
    where
        T: DeserializeOwned,
        F: Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    {
        let mut delay = self.retry.base_delay;
        let mut last = None;
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                sleep(delay);
                delay *= 2;
            }
            match Self::attempt(url, send()) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn attempt<T: DeserializeOwned>(url: &str, res: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Attempt<T> {
        let resp = match res {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(OracleError::Unreachable {
                    url: url.to_string(),
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().with_config().limit(BODY_LIMIT).read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(OracleError::Unreachable {
                    url: url.to_string(),
                    message: e.to_string(),
                })
            }
        };
        if (200..300).contains(&status) {
            return match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(OracleError::Protocol(e.to_string())),
            };
        }
        let (code, message) = match serde_json::from_str::<ErrorResponse>(&text) {
            Ok(e) => (e.error.code, e.error.message),
            Err(_) => ("unknown".to_string(), text),
        };
        let err = OracleError::Remote { status, code, message };
        if status >= 500 {
            Attempt::Retry(err)
        } else {
            Attempt::Fail(err)
        }
    }
}

impl Oracle for RemoteOracle {
    fn classes(&self) -> usize {
        self.classes
    }

    fn image_shape(&self) -> ImageShape {
        self.shape
    }

    fn query(&self, images: &Tensor<Real>, mode: OracleMode) -> Result<OracleResponse, OracleError> {
        validate_images(images, self.shape)?;
        let b = images.rows();
        let req = QueryRequest {
            mode,
            images: (0..b).map(|r| images.row(r).to_vec()).collect(),
            shape: self.shape,
        };
        let url = format!("{}/v1/query", self.base);
        let resp: QueryResponse = self.with_retries(&url, || self.agent.post(&url).send_json(&req))?;
        let out = match (mode, resp) {
            (OracleMode::Probability, QueryResponse::Outputs { outputs }) => {
                if outputs.len() != b || outputs.iter().any(|r| r.len() != self.classes) {
                    return Err(OracleError::Protocol(format!("expected {b} rows of {} probabilities", self.classes)));
                }
                let flat = outputs.into_iter().flatten().collect();
                OracleResponse::Probabilities(Tensor::new(&[b, self.classes], flat).map_err(|e| OracleError::Protocol(e.to_string()))?)
            }
            (OracleMode::Label, QueryResponse::Labels { labels }) => {
                if labels.len() != b || labels.iter().any(|&l| l >= self.classes) {
                    return Err(OracleError::Protocol(format!("expected {b} labels below {}", self.classes)));
                }
                OracleResponse::Labels(labels)
            }
            _ => return Err(OracleError::Protocol("response kind does not match the requested mode".into())),
        };
        self.counter.fetch_add(b as u64, Ordering::SeqCst);
        Ok(out)
    }

    fn queries(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}
