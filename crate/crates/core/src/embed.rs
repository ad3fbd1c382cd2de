//! Embedding providers.
//!
//! Every vector leaving [`Embedder::embed_batch`] is L2-normalized here,
//! whatever the provider returned, so that cosine similarity downstream is a
//! plain dot product.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

pub const NORM_TOLERANCE: f32 = 1e-5;

/// How many embedding requests may be in flight for one `embed_batch` call.
const MAX_IN_FLIGHT: usize = 4;
const BACKOFF_BASE: Duration = Duration::from_millis(250);

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding service unavailable: {0}")]
    Unavailable(String),
    #[error("embedding provider returned inconsistent dimensions ({expected} vs {got})")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding provider error (status {status}): {body}")]
    Provider { status: u16, body: String },
    #[error("cannot embed an empty text")]
    EmptyInput,
    #[error("embedding has no direction (zero or non-finite components)")]
    Degenerate,
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Scales `values` to unit length.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::Degenerate);
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Ok(Self(values))
    }

    /// Wraps values as-is; used when reading back persisted vectors.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() as f32
    }
}

/// 64-bit FNV-1a.
fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// SplitMix64 output function, used as a counter-based generator.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic pseudo-embedding of `text`: component `i` is drawn from a
/// counter-based generator keyed by the FNV-1a hash of the UTF-8 bytes.
pub fn stub_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim > 0, "stub_embed needs dim > 0");
    let seed = fnv1a64(text.as_bytes());
    let values: Vec<f32> = (0..dim as u64)
        .map(|i| {
            let bits = splitmix64(seed ^ splitmix64(i)) >> 40;
            (bits as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    EmbeddingVector::normalized(values).unwrap_or_else(|_| {
        let mut unit = vec![0.0; dim];
        unit[0] = 1.0;
        EmbeddingVector(unit)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedProviderKind {
    HttpOpenaiCompatible,
    #[default]
    DeterministicStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub provider: EmbedProviderKind,
    pub base_url: Option<String>,
    pub model_id: String,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Output dimension of the deterministic stub.
    pub stub_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            provider: EmbedProviderKind::DeterministicStub,
            base_url: None,
            model_id: "stub".into(),
            batch_size: 32,
            timeout_ms: 30_000,
            retries: 2,
            stub_dim: 32,
        }
    }
}

impl EmbedderConfig {
    pub fn stub(dim: usize) -> Self {
        Self {
            stub_dim: dim,
            ..Self::default()
        }
    }

    /// Applies `SI_EMBED_BASE_URL` / `SI_EMBED_MODEL`. Setting a base URL
    /// switches the provider to HTTP.
    pub fn apply_env(mut self) -> Self {
        if let Ok(url) = std::env::var("SI_EMBED_BASE_URL") {
            if !url.is_empty() {
                self.base_url = Some(url);
                self.provider = EmbedProviderKind::HttpOpenaiCompatible;
            }
        }
        if let Ok(model) = std::env::var("SI_EMBED_MODEL") {
            if !model.is_empty() {
                self.model_id = model;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.batch_size == 0 {
            return Err(EmbedError::InvalidConfig("batch_size must be > 0".into()));
        }
        match (self.provider, &self.base_url) {
            (EmbedProviderKind::HttpOpenaiCompatible, None) => Err(EmbedError::InvalidConfig(
                "base_url is required for the HTTP provider".into(),
            )),
            (EmbedProviderKind::DeterministicStub, Some(_)) => Err(EmbedError::InvalidConfig(
                "base_url is only valid for the HTTP provider".into(),
            )),
            (EmbedProviderKind::DeterministicStub, None) if self.stub_dim == 0 => {
                Err(EmbedError::InvalidConfig("stub_dim must be > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A backend returning raw (not necessarily normalized) vectors, one per
/// input text, in input order.
#[async_trait]
pub trait EmbeddingProvider: Send + Sync {
    async fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

pub struct StubProvider {
    pub dim: usize,
}

#[async_trait]
impl EmbeddingProvider for StubProvider {
    async fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| stub_embed(t, self.dim).into_inner()).collect())
    }
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct HttpProvider {
    client: reqwest::Client,
    url: String,
    model_id: String,
    timeout: Duration,
    retries: u32,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl HttpProvider {
    pub fn new(base_url: &str, model_id: &str, timeout: Duration, retries: u32) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: format!("{}/v1/embeddings", base_url.trim_end_matches('/')),
            model_id: model_id.to_string(),
            timeout,
            retries,
        }
    }

    async fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, Attempt> {
        let body = serde_json::json!({ "model": self.model_id, "input": texts });
        let resp = self
            .client
            .post(&self.url)
            .timeout(self.timeout)
            .json(&body)
            .send()
            .await
            .map_err(|e| Attempt::Retry(EmbedError::Unavailable(e.to_string())))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            let err = EmbedError::Provider {
                status: status.as_u16(),
                body,
            };
            return Err(if status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let parsed: EmbeddingsResponse = resp.json().await.map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(EmbedError::Unavailable(e.to_string()))
            } else {
                Attempt::Fatal(EmbedError::Provider {
                    status: status.as_u16(),
                    body: format!("malformed embeddings response: {e}"),
                })
            }
        })?;
        let mut data = parsed.data;
        data.sort_by_key(|d| d.index);
        let in_order = data.iter().enumerate().all(|(i, d)| d.index == i);
        if data.len() != texts.len() || !in_order {
            return Err(Attempt::Fatal(EmbedError::Provider {
                status: status.as_u16(),
                body: format!("expected {} embeddings indexed 0.., got {}", texts.len(), data.len()),
            }));
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

enum Attempt {
    Retry(EmbedError),
    Fatal(EmbedError),
}

#[async_trait]
impl EmbeddingProvider for HttpProvider {
    async fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut delay = BACKOFF_BASE;
        let mut attempt = 0;
        loop {
            match self.attempt(texts).await {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed, retrying");
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// Batching, normalizing front end over an [`EmbeddingProvider`].
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    model_id: String,
    batch_size: usize,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("model_id", &self.model_id)
            .field("batch_size", &self.batch_size)
            .finish()
    }
}

impl Embedder {
    pub fn from_config(cfg: &EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let provider: Arc<dyn EmbeddingProvider> = match cfg.provider {
            EmbedProviderKind::DeterministicStub => Arc::new(StubProvider { dim: cfg.stub_dim }),
            EmbedProviderKind::HttpOpenaiCompatible => Arc::new(HttpProvider::new(
                cfg.base_url.as_deref().unwrap_or_default(),
                &cfg.model_id,
                Duration::from_millis(cfg.timeout_ms),
                cfg.retries,
            )),
        };
        Ok(Self::new(provider, &cfg.model_id, cfg.batch_size))
    }

    pub fn new(provider: Arc<dyn EmbeddingProvider>, model_id: &str, batch_size: usize) -> Self {
        Self {
            provider,
            model_id: model_id.to_string(),
            batch_size: batch_size.max(1),
        }
    }

    pub fn stub(dim: usize) -> Self {
        Self::new(Arc::new(StubProvider { dim }), "stub", 32)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Embeds `texts` in order, at most `batch_size` texts per provider call.
    pub async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(EmbedError::EmptyInput);
        }
        let batches: Vec<Vec<Vec<f32>>> = futures::stream::iter(texts.chunks(self.batch_size).map(<[String]>::to_vec))
            .map(|batch: Vec<String>| async move {
                let raw = self.provider.embed_raw(&batch).await?;
                if raw.len() != batch.len() {
                    return Err(EmbedError::Provider {
                        status: 200,
                        body: format!("expected {} embeddings, got {}", batch.len(), raw.len()),
                    });
                }
                Ok(raw)
            })
            .buffered(MAX_IN_FLIGHT)
            .try_collect()
            .await?;

        let mut out = Vec::with_capacity(texts.len());
        let mut dim = None;
        for raw in batches.into_iter().flatten() {
            let expected = *dim.get_or_insert(raw.len());
            if raw.len() != expected {
                return Err(EmbedError::DimMismatch {
                    expected,
                    got: raw.len(),
                });
            }
            out.push(EmbeddingVector::normalized(raw)?);
        }
        Ok(out)
    }

    pub async fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.embed_batch(&[text.to_string()]).await?;
        Ok(v.remove(0))
    }
}
