//! Local HTTP+JSON service mirroring the CLI.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use pdhloop::ExecMode;
use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::error::{ShellError, ShellResult};
use crate::json;
use crate::ops::{self, TraceKind, TuneRequest};

type SessionLocks = Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>;

#[derive(Clone)]
pub struct AppState {
    workdir: PathBuf,
    /// One lock per session name, so each document has a single writer.
    sessions: SessionLocks,
}

impl AppState {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        AppState { workdir: workdir.into(), sessions: Arc::default() }
    }

    fn session_lock(&self, name: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut map = self.sessions.lock().expect("session map poisoned");
        map.entry(name.to_string()).or_default().clone()
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a str>,
    message: String,
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(e: &ShellError) -> Response {
    let (status, body) = match e {
        ShellError::Validation { path, message } => (
            StatusCode::BAD_REQUEST,
            ErrorBody { error: "validation", path: Some(path), message: message.clone() },
        ),
        ShellError::Compute(pdhloop::Error::Parse { .. }) | ShellError::Io(_) => {
            (StatusCode::BAD_REQUEST, ErrorBody { error: "validation", path: None, message: e.to_string() })
        }
        ShellError::Compute(inner) => {
            (StatusCode::UNPROCESSABLE_ENTITY, ErrorBody { error: "computation", path: None, message: inner.to_string() })
        }
    };
    json_response(status, json::to_string(&body))
}

fn respond<T: Serialize>(r: ShellResult<T>) -> Response {
    match r {
        Ok(v) => json_response(StatusCode::OK, json::to_string(&v)),
        Err(e) => error_response(&e),
    }
}

async fn blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> ShellResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => respond(r),
        Err(e) => json_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            json::to_string(&ErrorBody { error: "internal", path: None, message: e.to_string() }),
        ),
    }
}

async fn health() -> Response {
    json_response(StatusCode::OK, "{\"status\":\"ok\"}".into())
}

async fn evaluate(body: String) -> Response {
    blocking(move || {
        let cfg = ProjectConfig::parse(&body)?;
        ops::evaluate(&cfg, ExecMode::default())
    })
    .await
}

async fn tune(body: String) -> Response {
    blocking(move || {
        let req: TuneRequest = json::from_str(&body)?;
        req.config.validate().map_err(|e| match e {
            ShellError::Validation { path, message } => ShellError::Validation { path: format!("config.{path}"), message },
            other => other,
        })?;
        ops::tune(&req.config, &req.options)
    })
    .await
}

#[derive(Deserialize)]
struct BodeQuery {
    #[serde(default)]
    kind: TraceKind,
}

async fn ingest_bode(Query(q): Query<BodeQuery>, body: String) -> Response {
    blocking(move || ops::ingest_bode(&body, q.kind)).await
}

#[derive(Deserialize)]
struct RingdownQuery {
    exclude_s: Option<f64>,
}

async fn ingest_ringdown(Query(q): Query<RingdownQuery>, body: String) -> Response {
    blocking(move || ops::ingest_ringdown(&body, q.exclude_s)).await
}

fn session_path(state: &AppState, name: &str) -> ShellResult<PathBuf> {
    let ok = !name.is_empty() && name.len() <= 64 && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if !ok {
        return Err(ShellError::invalid("name", "session names use 1-64 characters from [A-Za-z0-9_-]"));
    }
    Ok(state.workdir.join(format!("{name}.json")))
}

async fn put_session(State(state): State<AppState>, Path(name): Path<String>, body: String) -> Response {
    let path = match session_path(&state, &name) {
        Ok(p) => p,
        Err(e) => return error_response(&e),
    };
    let cfg = match ProjectConfig::parse(&body) {
        Ok(c) => c,
        Err(e) => return error_response(&e),
    };
    let lock = state.session_lock(&name);
    let _guard = lock.lock().await;
    let text = json::to_string(&cfg);
    match tokio::fs::write(&path, &text).await {
        Ok(()) => json_response(StatusCode::OK, text),
        Err(e) => json_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            json::to_string(&ErrorBody { error: "storage", path: None, message: e.to_string() }),
        ),
    }
}

async fn get_session(State(state): State<AppState>, Path(name): Path<String>) -> Response {
    let path = match session_path(&state, &name) {
        Ok(p) => p,
        Err(e) => return error_response(&e),
    };
    let lock = state.session_lock(&name);
    let _guard = lock.lock().await;
    match tokio::fs::read_to_string(&path).await {
        Ok(text) => json_response(StatusCode::OK, text),
        Err(_) => json_response(
            StatusCode::NOT_FOUND,
            json::to_string(&ErrorBody { error: "not_found", path: None, message: format!("no session `{name}`") }),
        ),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/evaluate", post(evaluate))
        .route("/tune", post(tune))
        .route("/ingest/bode", post(ingest_bode))
        .route("/ingest/ringdown", post(ingest_ringdown))
        .route("/sessions/{name}", get(get_session).put(put_session))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, workdir: PathBuf) -> std::io::Result<()> {
    tokio::fs::create_dir_all(&workdir).await?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(workdir))).await
}
