//! HTTP routes, session store and JSON error mapping.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as SessionLock;

use crate::engine::{Attention, Engine, EngineError, Event, QueryOutcome, StateSummary, Suggestion};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_K: usize = 10;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub idle_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

/// Error body `{code, message}` with its status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_ready() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "model is still loading")
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::EmptyQuery => Self::new(StatusCode::BAD_REQUEST, "empty_query", msg),
            EngineError::ZeroK => Self::new(StatusCode::BAD_REQUEST, "invalid_k", msg),
            EngineError::UnknownDoc(_) => Self::new(StatusCode::NOT_FOUND, "unknown_document", msg),
            EngineError::Model(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct LiveSession {
    id: String,
    created_unix: u64,
    last_active: Instant,
    events: Vec<Event>,
    attention: Attention,
}

#[derive(Default)]
struct Sessions {
    live: HashMap<String, Arc<SessionLock<LiveSession>>>,
    expired: HashSet<String>,
}

/// Shared service state: the engine slot (empty while loading) and the sessions.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<RwLock<Option<Arc<Engine>>>>,
    sessions: Arc<Mutex<Sessions>>,
    config: ServiceConfig,
}

impl AppState {
    /// A service that answers 503 until [`AppState::set_engine`] is called.
    pub fn loading(config: ServiceConfig) -> Self {
        Self {
            engine: Arc::new(RwLock::new(None)),
            sessions: Arc::new(Mutex::new(Sessions::default())),
            config,
        }
    }

    pub fn ready(engine: Engine, config: ServiceConfig) -> Self {
        let s = Self::loading(config);
        s.set_engine(engine);
        s
    }

    pub fn set_engine(&self, engine: Engine) {
        *self.engine.write().expect("engine lock poisoned") = Some(Arc::new(engine));
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine
            .read()
            .expect("engine lock poisoned")
            .clone()
            .ok_or_else(ApiError::not_ready)
    }

    fn sweep(&self, sessions: &mut Sessions) {
        let timeout = self.config.idle_timeout;
        let stale: Vec<String> = sessions
            .live
            .iter()
            .filter(|(_, s)| s.try_lock().is_ok_and(|s| s.last_active.elapsed() > timeout))
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            sessions.live.remove(&id);
            sessions.expired.insert(id);
        }
    }

    /// Exclusive access to a live session; expired sessions answer 410.
    async fn lock(&self, id: &str) -> Result<tokio::sync::OwnedMutexGuard<LiveSession>, ApiError> {
        let slot = {
            let sessions = self.sessions.lock().expect("session map poisoned");
            if sessions.expired.contains(id) {
                return Err(gone(id));
            }
            sessions.live.get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))?
        };
        let guard = slot.lock_owned().await;
        if guard.last_active.elapsed() > self.config.idle_timeout {
            let mut sessions = self.sessions.lock().expect("session map poisoned");
            sessions.live.remove(id);
            sessions.expired.insert(id.to_string());
            return Err(gone(id));
        }
        Ok(guard)
    }
}

fn gone(id: &str) -> ApiError {
    ApiError::new(StatusCode::GONE, "session_expired", format!("session {id:?} expired"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub doc_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickResponse {
    pub suggestion: Suggestion,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub created_unix: u64,
    pub transcript: Vec<Event>,
    #[serde(flatten)]
    pub state: StateSummary,
    pub attention: Attention,
}

async fn create_session(State(app): State<AppState>) -> ApiResult<Created> {
    app.engine()?;
    let id = format!("{:032x}", rand::thread_rng().gen::<u128>());
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let session = LiveSession {
        id: id.clone(),
        created_unix,
        last_active: Instant::now(),
        events: Vec::new(),
        attention: Attention::default(),
    };
    let mut sessions = app.sessions.lock().expect("session map poisoned");
    app.sweep(&mut sessions);
    sessions.live.insert(id.clone(), Arc::new(SessionLock::new(session)));
    Ok(Json(Created { id }))
}

/// Runs model work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn submit_query(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<QueryOutcome> {
    let Json(req) = body?;
    let engine = app.engine()?;
    let mut session = app.lock(&id).await?;
    blocking(move || {
        let (outcome, event) = engine.submit_query(&session.events, &req.text, req.k)?;
        session.events.push(event);
        session.attention = outcome.attention.clone();
        session.last_active = Instant::now();
        Ok(Json(outcome))
    })
    .await
}

async fn register_click(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ClickRequest>, JsonRejection>,
) -> ApiResult<ClickResponse> {
    let Json(req) = body?;
    let engine = app.engine()?;
    let mut session = app.lock(&id).await?;
    blocking(move || {
        let (suggestion, event) = engine.register_click(&session.events, &req.doc_id)?;
        session.events.push(event);
        session.last_active = Instant::now();
        Ok(Json(ClickResponse { suggestion }))
    })
    .await
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let engine = app.engine()?;
    let mut session = app.lock(&id).await?;
    blocking(move || {
        let state = engine.state_summary(&session.events)?;
        session.last_active = Instant::now();
        Ok(Json(SessionView {
            id: session.id.clone(),
            created_unix: session.created_unix,
            transcript: session.events.clone(),
            state,
            attention: session.attention.clone(),
        }))
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query", post(submit_query))
        .route("/sessions/{id}/click", post(register_click))
        .with_state(state)
}
