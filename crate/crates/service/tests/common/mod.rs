#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use serde_json::Value;
use si_core::{ingest_corpus, ChunkingConfig, CorpusManifest, Embedder};
use si_service::{AppState, EngineParts, ServiceConfig};
use tempfile::TempDir;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    pub data: TempDir,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// Shuts down gracefully and hands back the data directory.
    pub async fn stop(mut self) -> TempDir {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            h.await.unwrap().unwrap();
        }
        self.data
    }
}

pub fn write_sources(dir: &Path, files: &[(&str, &str)]) {
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, body).unwrap();
    }
}

/// Ingests `files` as corpus `id` into `data_dir/corpora/{id}`.
pub async fn ingest(cfg: &ServiceConfig, id: &str, files: &[(&str, &str)]) -> CorpusManifest {
    let src = tempfile::tempdir().unwrap();
    write_sources(src.path(), files);
    let embedder = Embedder::from_config(&cfg.embedder).unwrap();
    ingest_corpus(
        src.path(),
        id,
        &ChunkingConfig::default(),
        &embedder,
        &cfg.corpora_dir().join(id),
    )
    .await
    .unwrap()
}

pub fn test_config(data: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: data.to_path_buf(),
        ..ServiceConfig::default()
    }
}

/// Starts a service over a fresh data directory after ingesting `corpora`.
pub async fn start(
    tweak: impl FnOnce(&mut ServiceConfig),
    corpora: &[(&str, &[(&str, &str)])],
) -> Server {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = test_config(data.path());
    tweak(&mut cfg);
    for (id, files) in corpora {
        ingest(&cfg, id, files).await;
    }
    start_in(data, cfg).await
}

pub async fn start_in(data: TempDir, cfg: ServiceConfig) -> Server {
    let parts = EngineParts::from_config(&cfg).unwrap();
    let state = Arc::new(AppState::new(cfg, parts).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(si_service::serve(listener, state.clone(), async {
        let _ = rx.await;
    }));
    Server {
        base,
        state,
        data,
        shutdown: Some(tx),
        handle: Some(handle),
    }
}

/// Splits an SSE body into `(event, data)` pairs, skipping comments.
pub fn parse_sse(body: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for block in body.split("\n\n") {
        let mut event = String::from("message");
        let mut data = Vec::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v));
            }
        }
        if !data.is_empty() {
            out.push((event, serde_json::from_str(&data.join("\n")).unwrap()));
        }
    }
    out
}

pub async fn create_session(client: &reqwest::Client, server: &Server, corpus: &str) -> String {
    let resp = client
        .post(server.url("/api/sessions"))
        .json(&serde_json::json!({"corpus_id": corpus}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let v: Value = resp.json().await.unwrap();
    v["session_id"].as_str().unwrap().to_string()
}

/// Posts `text` and returns the parsed event stream.
pub async fn post_message(client: &reqwest::Client, server: &Server, session: &str, text: &str) -> Vec<(String, Value)> {
    let resp = client
        .post(server.url(&format!("/api/sessions/{session}/messages")))
        .json(&serde_json::json!({"text": text}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200, "{:?}", resp.text().await);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    parse_sse(&resp.text().await.unwrap())
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}
