//! HTTP front end of the pairwise preference study.
//!
//! | route | purpose |
//! |---|---|
//! | `GET /api/session[?participant=]` | issue a session token |
//! | `GET /api/pairs/next?session=` | current pair or `{"done": true}` |
//! | `POST /api/choice` | record `{session, pair_id, outcome}` |
//! | `GET /api/export` | comparison log, requires `x-operator-key` |
//! | anything else | static files of the browser client |

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gvqa_core::preference::Outcome;
use gvqa_core::study::{SessionToken, Study};
use gvqa_core::Error;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const OPERATOR_HEADER: &str = "x-operator-key";

#[derive(Clone)]
pub struct AppState {
    pub study: Study,
    pub operator_key: String,
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Directory holding the browser bundle.
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session: String,
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    participant: Option<String>,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    session: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChoiceRequest {
    pub session: String,
    pub pair_id: String,
    pub outcome: Outcome,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

pub fn router(state: AppState, opts: &ServerOptions) -> Router {
    let api = Router::new()
        .route("/api/session", get(session))
        .route("/api/pairs/next", get(next_pair))
        .route("/api/choice", post(choice))
        .route("/api/export", get(export))
        .with_state(state);
    match &opts.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

async fn session(State(state): State<AppState>, Query(q): Query<SessionQuery>) -> Json<SessionResponse> {
    let participant = q
        .participant
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| format!("{:032x}", rand::random::<u128>()));
    let token = state.study.open_session(&participant);
    Json(SessionResponse {
        session: token.as_str().to_string(),
    })
}

async fn next_pair(State(state): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let token = SessionToken::parse(&q.session)?;
    Ok(Json(state.study.next_pair(&token)).into_response())
}

async fn choice(State(state): State<AppState>, Json(req): Json<ChoiceRequest>) -> Result<Response, ApiError> {
    let token = SessionToken::parse(&req.session)?;
    let study = state.study.clone();
    let ack = tokio::task::spawn_blocking(move || study.record_choice(&token, &req.pair_id, req.outcome))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(ack).into_response())
}

async fn export(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    let given = headers.get(OPERATOR_HEADER).and_then(|v| v.to_str().ok());
    if given != Some(state.operator_key.as_str()) {
        return Err(ApiError(StatusCode::FORBIDDEN, "operator key required".into()));
    }
    let body = state.study.export_jsonl()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState, opts: ServerOptions) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, state, opts).await
}

/// Serves on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState, opts: ServerOptions) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, &opts)).await
}
