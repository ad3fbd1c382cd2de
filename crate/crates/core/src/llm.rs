//! Response generation.
//!
//! [`OpenAiCompatibleGenerator`] streams from a local model server;
//! [`EchoGenerator`] and [`ScriptedGenerator`] are deterministic offline
//! stand-ins. Generation is never retried at this layer.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::time::Instant;

use crate::prompt::{PromptBundle, RenderedPrompt};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("model server unavailable: {0}")]
    Unavailable(String),
    #[error("model server error (status {status}): {body}")]
    Provider { status: u16, body: String },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f32,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    pub timeout_ms: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: "mistral:7b".into(),
            temperature: 0.7,
            max_tokens: 512,
            seed: None,
            stop: None,
            timeout_ms: 120_000,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::InvalidConfig("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_events: usize,
    pub latency_ms: u64,
}

impl GenerationResult {
    /// True when the stream was cut off by an error after some output.
    pub fn is_partial(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

pub type TokenSink<'a> = dyn FnMut(&str) + Send + 'a;

#[async_trait]
pub trait Generator: Send + Sync {
    /// Streams increments to `on_token` in order; the returned text is their
    /// concatenation.
    async fn generate(
        &self,
        bundle: &PromptBundle,
        params: &GenerationParams,
        on_token: &mut TokenSink<'_>,
    ) -> Result<GenerationResult, LlmError>;
}

/// Emits `increments` (capped at `max_tokens`) through `on_token`.
async fn replay(
    increments: &[String],
    params: &GenerationParams,
    delay: Option<Duration>,
    on_token: &mut TokenSink<'_>,
) -> GenerationResult {
    let start = Instant::now();
    let limit = params.max_tokens as usize;
    let mut text = String::new();
    let mut events = 0;
    for inc in increments.iter().take(limit) {
        if let Some(d) = delay {
            tokio::time::sleep(d).await;
        }
        on_token(inc);
        text.push_str(inc);
        events += 1;
    }
    GenerationResult {
        text,
        finish_reason: if increments.len() > limit {
            FinishReason::Length
        } else {
            FinishReason::Stop
        },
        token_events: events,
        latency_ms: start.elapsed().as_millis() as u64,
    }
}

/// Answers `ECHO[{context}|{question}]` in three increments:
/// `ECHO[`, `{context}|{question}`, `]`.
#[derive(Debug, Clone, Default)]
pub struct EchoGenerator {
    delay: Option<Duration>,
}

impl EchoGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sleeps before each increment; used to hold a turn open in tests.
    pub fn with_delay(delay: Duration) -> Self {
        Self { delay: Some(delay) }
    }

    pub fn expected_text(question: &str, context: &str) -> String {
        format!("ECHO[{context}|{question}]")
    }
}

#[async_trait]
impl Generator for EchoGenerator {
    async fn generate(
        &self,
        bundle: &PromptBundle,
        params: &GenerationParams,
        on_token: &mut TokenSink<'_>,
    ) -> Result<GenerationResult, LlmError> {
        let increments = [
            "ECHO[".to_string(),
            format!("{}|{}", bundle.context, bundle.question),
            "]".to_string(),
        ];
        Ok(replay(&increments, params, self.delay, on_token).await)
    }
}

/// Plays back a fixed list of responses, one per call; the last response
/// repeats once the list is exhausted. Each response streams word by word.
#[derive(Debug)]
pub struct ScriptedGenerator {
    responses: Vec<String>,
    calls: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let responses: Vec<String> = responses.into_iter().map(Into::into).collect();
        assert!(!responses.is_empty(), "scripted generator needs at least one response");
        Self {
            responses,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Generator for ScriptedGenerator {
    async fn generate(
        &self,
        _bundle: &PromptBundle,
        params: &GenerationParams,
        on_token: &mut TokenSink<'_>,
    ) -> Result<GenerationResult, LlmError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let response = &self.responses[call.min(self.responses.len() - 1)];
        let increments: Vec<String> = response.split_inclusive(' ').map(String::from).collect();
        Ok(replay(&increments, params, None, on_token).await)
    }
}

/// Incremental `text/event-stream` line splitter yielding `data:` payloads.
#[derive(Default)]
pub struct SseDecoder {
    buf: Vec<u8>,
}

impl SseDecoder {
    pub fn push(&mut self, bytes: &[u8]) -> Vec<String> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(nl) = self.buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=nl).collect();
            let line = String::from_utf8_lossy(&line);
            let line = line.trim_end_matches(['\n', '\r']);
            if let Some(data) = line.strip_prefix("data:") {
                out.push(data.strip_prefix(' ').unwrap_or(data).to_string());
            }
        }
        out
    }
}

/// Streaming client for `/v1/chat/completions` (chat bundles) and
/// `/v1/completions` (raw bundles).
pub struct OpenAiCompatibleGenerator {
    client: reqwest::Client,
    base_url: String,
}

impl OpenAiCompatibleGenerator {
    pub fn new(base_url: &str) -> Self {
        Self {
            client: reqwest::Client::new(),
            base_url: base_url.trim_end_matches('/').to_string(),
        }
    }

    fn request_body(bundle: &PromptBundle, params: &GenerationParams) -> (String, Value) {
        let mut body = json!({
            "model": params.model_id,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "stream": true,
        });
        let path = match &bundle.rendered {
            RenderedPrompt::Messages(msgs) => {
                body["messages"] = json!(msgs);
                "/v1/chat/completions"
            }
            RenderedPrompt::Raw(prompt) => {
                body["prompt"] = json!(prompt);
                "/v1/completions"
            }
        };
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if let Some(stop) = &params.stop {
            body["stop"] = json!(stop);
        }
        (path.to_string(), body)
    }
}

fn delta_text(chunk: &Value) -> Option<&str> {
    let choice = chunk.get("choices")?.get(0)?;
    choice
        .get("delta")
        .and_then(|d| d.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
}

fn finish_reason(chunk: &Value) -> Option<FinishReason> {
    let reason = chunk.get("choices")?.get(0)?.get("finish_reason")?.as_str()?;
    Some(match reason {
        "length" => FinishReason::Length,
        _ => FinishReason::Stop,
    })
}

#[async_trait]
impl Generator for OpenAiCompatibleGenerator {
    async fn generate(
        &self,
        bundle: &PromptBundle,
        params: &GenerationParams,
        on_token: &mut TokenSink<'_>,
    ) -> Result<GenerationResult, LlmError> {
        params.validate()?;
        let start = Instant::now();
        let deadline = start + Duration::from_millis(params.timeout_ms);
        let (path, body) = Self::request_body(bundle, params);
        let send = self.client.post(format!("{}{path}", self.base_url)).json(&body).send();
        let resp = match tokio::time::timeout_at(deadline, send).await {
            Err(_) => return Err(LlmError::Unavailable("timed out before response".into())),
            Ok(Err(e)) => return Err(LlmError::Unavailable(e.to_string())),
            Ok(Ok(r)) => r,
        };
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::Provider {
                status: status.as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }

        let mut text = String::new();
        let mut events = 0usize;
        let mut finish = FinishReason::Stop;
        let mut decoder = SseDecoder::default();
        let mut stream = resp.bytes_stream();
        let failure: Option<String> = 'read: loop {
            let bytes = match tokio::time::timeout_at(deadline, stream.next()).await {
                Err(_) => break 'read Some("timed out mid-stream".into()),
                Ok(None) => break 'read None,
                Ok(Some(Err(e))) => break 'read Some(e.to_string()),
                Ok(Some(Ok(b))) => b,
            };
            for payload in decoder.push(&bytes) {
                if payload.trim() == "[DONE]" {
                    break 'read None;
                }
                let chunk: Value = match serde_json::from_str(&payload) {
                    Ok(v) => v,
                    Err(e) => {
                        tracing::warn!(error = %e, "skipping malformed stream chunk");
                        continue;
                    }
                };
                if let Some(delta) = delta_text(&chunk).filter(|d| !d.is_empty()) {
                    on_token(delta);
                    text.push_str(delta);
                    events += 1;
                }
                if let Some(reason) = finish_reason(&chunk) {
                    finish = reason;
                }
            }
        };
        if let Some(reason) = failure {
            if events == 0 {
                return Err(LlmError::Unavailable(reason));
            }
            tracing::warn!(%reason, "generation cut short, keeping partial text");
            finish = FinishReason::Error;
        }
        Ok(GenerationResult {
            text,
            finish_reason: finish,
            token_events: events,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmProviderKind {
    HttpOpenaiCompatible,
    #[default]
    EchoStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub provider: LlmProviderKind,
    pub base_url: Option<String>,
    #[serde(flatten)]
    pub params: GenerationParams,
    /// Per-increment delay of the echo stub.
    pub stub_delay_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            provider: LlmProviderKind::EchoStub,
            base_url: None,
            params: GenerationParams::default(),
            stub_delay_ms: 0,
        }
    }
}

impl LlmConfig {
    /// Applies `SI_LLM_BASE_URL` / `SI_LLM_MODEL`. Setting a base URL
    /// switches the provider to HTTP.
    pub fn apply_env(mut self) -> Self {
        if let Ok(url) = std::env::var("SI_LLM_BASE_URL") {
            if !url.is_empty() {
                self.base_url = Some(url);
                self.provider = LlmProviderKind::HttpOpenaiCompatible;
            }
        }
        if let Ok(model) = std::env::var("SI_LLM_MODEL") {
            if !model.is_empty() {
                self.params.model_id = model;
            }
        }
        self
    }

    pub fn build(&self) -> Result<Arc<dyn Generator>, LlmError> {
        self.params.validate()?;
        Ok(match (self.provider, &self.base_url) {
            (LlmProviderKind::EchoStub, _) if self.stub_delay_ms > 0 => {
                Arc::new(EchoGenerator::with_delay(Duration::from_millis(self.stub_delay_ms)))
            }
            (LlmProviderKind::EchoStub, _) => Arc::new(EchoGenerator::new()),
            (LlmProviderKind::HttpOpenaiCompatible, Some(url)) => Arc::new(OpenAiCompatibleGenerator::new(url)),
            (LlmProviderKind::HttpOpenaiCompatible, None) => {
                return Err(LlmError::InvalidConfig("base_url is required for the HTTP provider".into()))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{PromptTemplate, RenderMode};

    fn bundle(q: &str, c: &str) -> PromptBundle {
        PromptTemplate::golden(RenderMode::ChatMessages).render(q, c).unwrap()
    }

    async fn run(g: &dyn Generator, b: &PromptBundle, p: &GenerationParams) -> (GenerationResult, Vec<String>) {
        let mut seen = Vec::new();
        let r = g.generate(b, p, &mut |t: &str| seen.push(t.to_string())).await.unwrap();
        assert_eq!(r.text, seen.concat());
        assert_eq!(r.token_events, seen.len());
        (r, seen)
    }

    #[tokio::test]
    async fn echo_contract() {
        let g = EchoGenerator::new();
        let p = GenerationParams::default();
        let (r, seen) = run(&g, &bundle("Q", "C"), &p).await;
        assert_eq!(r.text, "ECHO[C|Q]");
        assert_eq!(seen.len(), 3);
        assert_eq!(r.finish_reason, FinishReason::Stop);
        let (r, _) = run(&g, &bundle("Q", ""), &p).await;
        assert_eq!(r.text, "ECHO[|Q]");
    }

    #[tokio::test]
    async fn echo_is_deterministic() {
        let g = EchoGenerator::new();
        let b = bundle("How are you doing?", "some context");
        let p = GenerationParams::default();
        let first = run(&g, &b, &p).await.0.text;
        for _ in 0..100 {
            assert_eq!(run(&g, &b, &p).await.0.text, first);
        }
    }

    #[tokio::test]
    async fn echo_max_tokens_one() {
        let p = GenerationParams {
            max_tokens: 1,
            ..GenerationParams::default()
        };
        let (r, _) = run(&EchoGenerator::new(), &bundle("Q", "C"), &p).await;
        assert_eq!(r.text, "ECHO[");
        assert_eq!(r.finish_reason, FinishReason::Length);
    }

    #[tokio::test]
    async fn scripted_plays_in_order_then_repeats() {
        let g = ScriptedGenerator::new(["one two", "three"]);
        let p = GenerationParams::default();
        let b = bundle("Q", "C");
        let (r, seen) = run(&g, &b, &p).await;
        assert_eq!((r.text.as_str(), seen.len()), ("one two", 2));
        assert_eq!(run(&g, &b, &p).await.0.text, "three");
        assert_eq!(run(&g, &b, &p).await.0.text, "three");
        assert_eq!(g.calls(), 3);
    }

    #[test]
    fn sse_decoder_handles_split_lines() {
        let mut d = SseDecoder::default();
        assert!(d.push(b"data: {\"a\"").is_empty());
        assert_eq!(d.push(b":1}\r\n\r\ndata:[DONE]\n"), vec!["{\"a\":1}", "[DONE]"]);
        assert!(d.push(b": keep-alive\n").is_empty());
    }

    #[test]
    fn request_bodies() {
        let p = GenerationParams {
            seed: Some(7),
            ..GenerationParams::default()
        };
        let (path, body) = OpenAiCompatibleGenerator::request_body(&bundle("Q", "C"), &p);
        assert_eq!(path, "/v1/chat/completions");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "Question: Q\nContext: C\nAnswer:");
        assert_eq!(body["stream"], true);
        assert_eq!(body["seed"], 7);
        assert!(body.get("stop").is_none());

        let raw = PromptTemplate::golden(RenderMode::RawInst).render("Q", "C").unwrap();
        let (path, body) = OpenAiCompatibleGenerator::request_body(&raw, &GenerationParams::default());
        assert_eq!(path, "/v1/completions");
        assert!(body["prompt"].as_str().unwrap().ends_with("Answer:[/INST]"));
    }

    #[test]
    fn params_validation() {
        assert!(GenerationParams::default().validate().is_ok());
        let bad = GenerationParams {
            max_tokens: 0,
            ..GenerationParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenerationParams {
            temperature: f32::NAN,
            ..GenerationParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
