//! HTTP chat service.
//!
//! The model is loaded once and shared read-only; each session owns its own
//! dialogue state behind a mutex, so messages to one session are handled in
//! arrival order while different sessions run concurrently.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use awi_core::corpus::tokenize;
use awi_core::{AwiParams, DecodeConfig, Session, StateCarry, Vocab};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub const IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

/// Immutable inference bundle.
pub struct Model {
    pub params: AwiParams,
    pub vocab: Vocab,
    pub decode: DecodeConfig,
    pub carry: StateCarry,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

pub struct ApiSession {
    pub session: Session,
    pub created_at: Instant,
    pub last_active: Instant,
    pub transcript: Vec<Utterance>,
}

type SessionHandle = Arc<tokio::sync::Mutex<ApiSession>>;

/// Shared service state.
pub struct AppState {
    model: RwLock<Option<Arc<Model>>>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    idle_timeout: Duration,
}

impl AppState {
    pub fn new(model: Option<Model>) -> Arc<Self> {
        Self::with_idle_timeout(model, IDLE_TIMEOUT)
    }

    pub fn with_idle_timeout(model: Option<Model>, idle_timeout: Duration) -> Arc<Self> {
        Arc::new(AppState {
            model: RwLock::new(model.map(Arc::new)),
            sessions: Mutex::new(HashMap::new()),
            idle_timeout,
        })
    }

    pub fn load(&self, model: Model) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<Model>> {
        self.model.read().expect("model lock poisoned").clone()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
    }

    /// Drops sessions idle for longer than the timeout as of `now`. Sessions
    /// busy with a request are kept. Returns how many were removed.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table poisoned");
        let before = table.len();
        table.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_active) <= self.idle_timeout,
            Err(_) => true,
        });
        before - table.len()
    }
}

/// Periodically evicts idle sessions for as long as the runtime lives.
pub fn spawn_evictor(state: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            state.evict_idle(Instant::now());
        }
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/message", post(post_message))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_loaded: state.model().is_some(),
        sessions: state.session_count(),
    })
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let model = state
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))?;
    let now = Instant::now();
    state.evict_idle(now);
    let session = ApiSession {
        session: Session::new(&model.params, model.decode).with_carry(model.carry),
        created_at: now,
        last_active: now,
        transcript: Vec::new(),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

#[derive(Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub turn_index: usize,
    pub transcript: Vec<Utterance>,
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let handle = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))?;
    let s = handle.lock().await;
    Ok(Json(SessionView {
        session_id: id,
        turn_index: s.session.turn_index(),
        transcript: s.transcript.clone(),
    }))
}

#[derive(Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    /// One row per reply token (including `</s>`), one column per source
    /// token (including `</s>`).
    pub attention: Vec<Vec<f64>>,
    /// Completed exchanges in this session, counting this one.
    pub turn_index: usize,
    pub source_tokens: Vec<String>,
    pub reply_tokens: Vec<String>,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> Result<Json<MessageReply>, ApiError> {
    let handle = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))?;
    if tokenize(&req.text).is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "text must not be empty",
        ));
    }
    let model = state
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))?;

    let mut guard = handle.lock_owned().await;
    let (guard, reply) = tokio::task::spawn_blocking(move || {
        let reply = guard
            .session
            .respond(&model.params, &model.vocab, &req.text);
        if let Ok(r) = &reply {
            guard.transcript.push(Utterance {
                speaker: Speaker::User,
                text: req.text,
            });
            guard.transcript.push(Utterance {
                speaker: Speaker::Agent,
                text: r.text.clone(),
            });
        }
        guard.last_active = Instant::now();
        (guard, reply)
    })
    .await
    .map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("generation task failed: {e}"),
        )
    })?;
    let reply =
        reply.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(MessageReply {
        reply: reply.text,
        attention: reply.attention,
        turn_index: guard.session.turn_index(),
        source_tokens: reply.source_tokens,
        reply_tokens: reply.reply_tokens,
    }))
}
