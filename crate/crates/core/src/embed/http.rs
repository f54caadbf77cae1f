//! Blocking client for an external embedding service.
//!
//! Wire protocol (JSON over HTTP POST, versioned by path):
//!
//! ```text
//! POST {base}/v1/embed/text   {"model": "...", "texts": ["...", ...]}
//! POST {base}/v1/embed/crop   {"model": "...", "image_id": "...", "image_uri": "...", "box": [x1, y1, x2, y2]}
//! ->                          {"vectors": [[f32; dim], ...]}
//! ```

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{checked_unit, EmbedError, Embedder};
use crate::geometry::Rect;

pub const ENV_EMBEDDER_URL: &str = "GRIDSEARCH_EMBEDDER_URL";
pub const ENV_EMBEDDER_TOKEN: &str = "GRIDSEARCH_EMBEDDER_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after every further failure.
    #[serde(with = "millis")]
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderEndpoint {
    /// Empty means: read `GRIDSEARCH_EMBEDDER_URL`.
    #[serde(default)]
    pub base_uri: String,
    pub model_id: String,
    pub dim: usize,
    #[serde(with = "millis", default = "default_timeout")]
    pub timeout: Duration,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_batch")]
    pub max_batch: usize,
}

fn default_timeout() -> Duration {
    Duration::from_secs(30)
}

fn default_concurrency() -> usize {
    8
}

fn default_batch() -> usize {
    64
}

impl EmbedderEndpoint {
    pub fn new(base_uri: impl Into<String>, model_id: impl Into<String>, dim: usize) -> Self {
        Self {
            base_uri: base_uri.into(),
            model_id: model_id.into(),
            dim,
            timeout: default_timeout(),
            retry: RetryPolicy::default(),
            token: None,
            max_concurrency: default_concurrency(),
            max_batch: default_batch(),
        }
    }

    /// Base URI and token from `GRIDSEARCH_EMBEDDER_URL` / `GRIDSEARCH_EMBEDDER_TOKEN`.
    pub fn from_env(model_id: impl Into<String>, dim: usize) -> Option<Self> {
        let base = std::env::var(ENV_EMBEDDER_URL).ok()?;
        let mut ep = Self::new(base, model_id, dim);
        ep.token = std::env::var(ENV_EMBEDDER_TOKEN).ok();
        Some(ep)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct TextRequest<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Serialize)]
struct CropRequest<'a> {
    model: &'a str,
    image_id: &'a str,
    image_uri: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f32>>,
}

pub struct HttpEmbedder {
    endpoint: EmbedderEndpoint,
    agent: ureq::Agent,
    limit: Semaphore,
}

enum Attempt {
    Retry(EmbedError),
    Fatal(EmbedError),
}

impl HttpEmbedder {
    pub fn new(endpoint: EmbedderEndpoint) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let limit = Semaphore::new(endpoint.max_concurrency);
        Self {
            endpoint,
            agent,
            limit,
        }
    }

    pub fn endpoint(&self) -> &EmbedderEndpoint {
        &self.endpoint
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_uri.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &impl Serialize, uri: Option<&str>) -> Result<Vec<Vec<f32>>, Attempt> {
        let _permit = self.limit.acquire();
        let mut req = self.agent.post(url);
        if let Some(token) = &self.endpoint.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            Attempt::Retry(EmbedError::Transport {
                attempts: 0,
                message: e.to_string(),
            })
        })?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let message = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(match (status, uri) {
                (429 | 500..=599, _) => Attempt::Retry(EmbedError::Status { status, message }),
                (404 | 422, Some(uri)) => Attempt::Fatal(EmbedError::ImageFetch {
                    uri: uri.to_string(),
                    message,
                }),
                _ => Attempt::Fatal(EmbedError::Status { status, message }),
            });
        }
        resp.body_mut()
            .read_json::<VectorsResponse>()
            .map(|r| r.vectors)
            .map_err(|e| Attempt::Fatal(EmbedError::BadResponse(e.to_string())))
    }

    fn post(&self, path: &str, body: &impl Serialize, uri: Option<&str>) -> Result<Vec<Vec<f32>>, EmbedError> {
        let url = self.url(path);
        let policy = self.endpoint.retry;
        let mut delay = policy.backoff;
        let attempts = policy.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.post_once(&url, body, uri) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= attempts => {
                    return Err(match e {
                        EmbedError::Transport { message, .. } => EmbedError::Transport {
                            attempts: attempt,
                            message,
                        },
                        other => other,
                    });
                }
                Err(Attempt::Retry(e)) => {
                    warn!(%url, attempt, error = %e, "embedder request failed, retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn unit_rows(&self, rows: Vec<Vec<f32>>, expected: usize) -> Result<Vec<Vec<f32>>, EmbedError> {
        if rows.len() != expected {
            return Err(EmbedError::BadResponse(format!(
                "expected {expected} vectors, got {}",
                rows.len()
            )));
        }
        rows.iter().map(|v| checked_unit(v, self.endpoint.dim)).collect()
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.endpoint.model_id
    }

    fn dim(&self) -> usize {
        self.endpoint.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.endpoint.max_batch.max(1)) {
            debug!(n = chunk.len(), "embedding text batch");
            let body = TextRequest {
                model: &self.endpoint.model_id,
                texts: chunk,
            };
            let rows = self.post("/v1/embed/text", &body, None)?;
            out.extend(self.unit_rows(rows, chunk.len())?);
        }
        Ok(out)
    }

    fn embed_crop(&self, image_id: &str, image_uri: &str, bbox: &Rect) -> Result<Vec<f32>, EmbedError> {
        let body = CropRequest {
            model: &self.endpoint.model_id,
            image_id,
            image_uri,
            bbox: bbox.as_array(),
        };
        let rows = self.post("/v1/embed/crop", &body, Some(image_uri))?;
        Ok(self.unit_rows(rows, 1)?.remove(0))
    }
}
