//! HTTP routes.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use si_core::engine::EngineError;
use si_core::retrieval::RetrievalError;
use si_core::session::{SessionError, SessionStatus};
use si_core::{CorpusManifest, EmbedError, LlmError, Session, TurnEvent};
use tokio::sync::mpsc;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::state::{AppState, StateError};

pub type SharedState = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn body(&self) -> Value {
        json!({"error": {"code": self.code, "message": self.message}})
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        let msg = e.to_string();
        match e {
            StateError::Session(SessionError::NotFound(_)) => Self::new(StatusCode::NOT_FOUND, "session_not_found", msg),
            StateError::UnknownCorpus(_) => Self::new(StatusCode::NOT_FOUND, "corpus_not_found", msg),
            StateError::ModelMismatch { .. } => Self::new(StatusCode::CONFLICT, "embedding_model_mismatch", msg),
            StateError::Corpus(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "corpus_invalid", msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        let (status, code) = match e {
            EngineError::SessionClosed => (StatusCode::CONFLICT, "session_closed"),
            EngineError::EmptyQuestion => (StatusCode::BAD_REQUEST, "invalid_request"),
            EngineError::CorpusMismatch { .. } => (StatusCode::CONFLICT, "corpus_mismatch"),
            EngineError::Retrieval(RetrievalError::Embed(EmbedError::Unavailable(_))) => {
                (StatusCode::BAD_GATEWAY, "embedder_unavailable")
            }
            EngineError::Retrieval(RetrievalError::Embed(_)) => (StatusCode::BAD_GATEWAY, "embedder_error"),
            EngineError::Retrieval(_) => (StatusCode::INTERNAL_SERVER_ERROR, "retrieval_failed"),
            EngineError::Llm(LlmError::Unavailable(_)) => (StatusCode::BAD_GATEWAY, "llm_unavailable"),
            EngineError::Llm(_) => (StatusCode::BAD_GATEWAY, "llm_error"),
            EngineError::Prompt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "prompt_error"),
            EngineError::Session(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage_error"),
        };
        Self::new(status, code, msg)
    }
}

fn bad_json(e: JsonRejection) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
}

pub fn router(state: SharedState) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/schemas", get(schemas))
        .route("/api/corpora", get(list_corpora))
        .route("/api/corpora/{id}/reload", post(reload_corpus))
        .route("/api/corpora/{cid}/chunks/{chunk_id}", get(get_chunk))
        .route("/api/sessions", get(list_sessions).post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/sessions/{id}/close", post(close_session))
        .route("/api", get(not_found))
        .route("/api/{*rest}", get(not_found).post(not_found));

    let app = match state.config.ui_dir.clone() {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/", get(index)).fallback(not_found),
    };
    let app = match cors(&state.config.cors_allowed_origins) {
        Some(layer) => app.layer(layer),
        None => app,
    };
    app.with_state(state)
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let origin = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(origin)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]),
    )
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn index() -> Json<Value> {
    Json(json!({"service": "si", "version": env!("CARGO_PKG_VERSION"), "api": "/api"}))
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

/// JSON schemas of every payload the API emits.
pub const SCHEMAS: &str = include_str!("../schemas/api.json");

async fn schemas() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], SCHEMAS).into_response()
}

async fn list_corpora(State(state): State<SharedState>) -> Json<Vec<CorpusManifest>> {
    Json(state.engines().iter().map(|e| e.corpus().manifest().clone()).collect())
}

async fn reload_corpus(
    State(state): State<SharedState>,
    Path(id): Path<String>,
) -> Result<Json<CorpusManifest>, ApiError> {
    let s = state.clone();
    let engine = tokio::task::spawn_blocking(move || s.reload(&id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(engine.corpus().manifest().clone()))
}

async fn get_chunk(
    State(state): State<SharedState>,
    Path((cid, chunk_id)): Path<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    let engine = state
        .engine(&cid)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "corpus_not_found", format!("corpus `{cid}` not found")))?;
    let corpus = engine.corpus();
    let chunk = corpus
        .chunk(&chunk_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "chunk_not_found", format!("chunk `{chunk_id}` not found")))?;
    let doc = corpus.document(&chunk.doc_id).map(|d| {
        json!({
            "id": d.id,
            "corpus_id": d.corpus_id,
            "kind": d.kind,
            "source_path": d.source_path,
            "metadata": d.metadata,
        })
    });
    Ok(Json(json!({"corpus_id": cid, "chunk": chunk, "document": doc})))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionParams {
    #[serde(default)]
    generation: Option<Value>,
    #[serde(default)]
    retrieval: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    corpus_id: String,
    #[serde(default)]
    params: Option<SessionParams>,
}

/// Overlays the keys of `patch` onto the serialized `base`.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<Value>) -> Result<T, ApiError> {
    let Some(patch) = patch else {
        return serde_json::from_value(json!(base)).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()));
    };
    let Value::Object(patch) = patch else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", "params must be objects"));
    };
    let mut merged = json!(base);
    for (k, v) in patch {
        if merged.get(&k).is_none() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", format!("unknown parameter `{k}`")));
        }
        merged[&k] = v;
    }
    serde_json::from_value(merged).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))
}

async fn create_session(
    State(state): State<SharedState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(req) = body.map_err(bad_json)?;
    if state.engine(&req.corpus_id).is_none() {
        return Err(StateError::UnknownCorpus(req.corpus_id).into());
    }
    let params = req.params.unwrap_or_default();
    let generation = overlay(&state.config.llm.params, params.generation)?;
    generation
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))?;
    let retrieval = overlay(&state.config.retrieval, params.retrieval)?;
    retrieval
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))?;
    let session = Session::new(&req.corpus_id, generation, retrieval, state.template_id());
    let id = session.id.clone();
    state.new_session(session)?;
    tracing::info!(session = %id, corpus = %req.corpus_id, "session created");
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))))
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    id: String,
    corpus_id: String,
    created_at: DateTime<Utc>,
    status: SessionStatus,
    turn_count: usize,
}

async fn list_sessions(State(state): State<SharedState>) -> Result<Json<Vec<SessionSummary>>, ApiError> {
    let mut out = Vec::new();
    for id in state.session_ids()? {
        let s = match state.session(&id) {
            Ok(slot) => slot.snapshot(),
            Err(e) => {
                tracing::warn!(session = %id, error = %e, "skipping unreadable session");
                continue;
            }
        };
        out.push(SessionSummary {
            id: s.id,
            corpus_id: s.corpus_id,
            created_at: s.created_at,
            status: s.status,
            turn_count: s.turns.len(),
        });
    }
    out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.id.cmp(&b.id)));
    Ok(Json(out))
}

async fn get_session(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    Ok(Json(state.session(&id)?.snapshot()))
}

async fn close_session(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    let slot = state.session(&id)?;
    let mut live = slot
        .live
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "turn_in_progress", "a turn is being generated"))?;
    if live.is_active() {
        live.status = SessionStatus::Closed;
        state.store.write_meta(&live).map_err(StateError::from)?;
        slot.publish(&live);
    }
    Ok(Json(live.clone()))
}

#[derive(Debug, Deserialize)]
struct PostMessage {
    text: String,
}

/// Serializes `data` directly so that `f32` scores keep their shortest form.
fn sse_event(name: &str, data: &impl Serialize) -> Event {
    let text = serde_json::to_string(data).unwrap_or_else(|e| {
        json!({"error": {"code": "internal", "message": e.to_string()}}).to_string()
    });
    Event::default().event(name).data(text)
}

#[derive(Serialize)]
struct GuardsPayload<'a> {
    attempt: u32,
    regenerating: bool,
    verdicts: &'a [si_core::GuardVerdict],
}

fn turn_event(ev: TurnEvent) -> Event {
    match ev {
        TurnEvent::Retrieval(hits) => sse_event("retrieval", &BTreeMap::from([("hits", hits)])),
        TurnEvent::Token(text) => sse_event("token", &BTreeMap::from([("text", text)])),
        TurnEvent::Guards {
            attempt,
            verdicts,
            regenerating,
        } => sse_event(
            "guards",
            &GuardsPayload {
                attempt,
                regenerating,
                verdicts: &verdicts,
            },
        ),
    }
}

async fn post_message(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Response, ApiError> {
    let slot = state.session(&id)?;
    let Json(req) = body.map_err(bad_json)?;
    let mut live = slot
        .live
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "turn_in_progress", "a turn is already being generated"))?;
    if !live.is_active() {
        return Err(EngineError::SessionClosed.into());
    }
    if req.text.trim().is_empty() {
        return Err(EngineError::EmptyQuestion.into());
    }
    let engine = state.engine(&live.corpus_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "corpus_not_found",
            format!("corpus `{}` is not loaded", live.corpus_id),
        )
    })?;

    let (tx, rx) = mpsc::unbounded_channel::<Event>();
    tokio::spawn(async move {
        let events = tx.clone();
        let mut sink = move |ev: TurnEvent| {
            let _ = events.send(turn_event(ev));
        };
        let result = engine.run_turn(&mut live, Some(&state.store), &req.text, &mut sink).await;
        match result {
            Ok(turn) => {
                let _ = tx.send(sse_event("done", &turn));
                slot.publish(&live);
            }
            Err(e) => {
                tracing::warn!(session = %live.id, error = %e, "turn failed");
                let _ = tx.send(sse_event("error", &ApiError::from(e).body()));
            }
        }
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|e| (Ok::<_, Infallible>(e), rx))
    });
    Ok(Sse::new(stream)
        .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
        .into_response())
}
