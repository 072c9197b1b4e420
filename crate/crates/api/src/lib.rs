//! HTTP/JSON service over the grading engine.
//!
//! Every response carries the [`SCHEMA_HEADER`] header. Errors are JSON
//! objects `{code, message, details}`. Mutations may carry an
//! `Idempotency-Key` header; a retry with the same key gets the first
//! response back instead of running again.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::http::HeaderValue;
use axum::response::Response;
use axum::Router;
use chrono::TimeDelta;
use mta_core::engine::Engine;

pub mod auth;
pub mod error;
mod idempotency;
mod routes;

pub use auth::{Auth, CredentialBackend, Session, Sessions, StaticUsers};
pub use error::{ApiError, ErrorBody};
pub use idempotency::{IDEMPOTENCY_HEADER, REPLAYED_HEADER};
pub use routes::{AppealsTab, CourseMembership, Login, ScheduleRequest};

pub const SCHEMA_HEADER: &str = "x-schema-version";
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub session_ttl: TimeDelta,
    /// Bearer token that acts as the command-line operator. Off when `None`.
    pub operator_token: Option<String>,
    pub max_body_bytes: usize,
    /// Number of idempotent responses kept for replay.
    pub idempotency_capacity: usize,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            session_ttl: TimeDelta::hours(12),
            operator_token: None,
            max_body_bytes: 64 << 20,
            idempotency_capacity: 10_000,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Engine,
    pub sessions: Arc<Sessions>,
    credentials: Arc<dyn CredentialBackend>,
    operator_token: Option<Arc<str>>,
    replies: Arc<idempotency::Replies>,
    max_body_bytes: usize,
}

impl AppState {
    pub fn new(engine: Engine, credentials: impl CredentialBackend + 'static, config: ApiConfig) -> Self {
        Self {
            engine,
            sessions: Arc::new(Sessions::new(config.session_ttl)),
            credentials: Arc::new(credentials),
            operator_token: config.operator_token.map(Arc::from),
            replies: Arc::new(idempotency::Replies::new(config.idempotency_capacity)),
            max_body_bytes: config.max_body_bytes,
        }
    }
}

async fn stamp_schema(mut resp: Response) -> Response {
    resp.headers_mut().insert(SCHEMA_HEADER, HeaderValue::from_static(SCHEMA_VERSION));
    resp
}

pub fn router(state: AppState) -> Router {
    let limit = state.max_body_bytes;
    routes::routes()
        .layer(axum::middleware::from_fn_with_state(state.clone(), idempotency::middleware))
        .layer(DefaultBodyLimit::max(limit))
        .layer(axum::middleware::map_response(stamp_schema))
        .with_state(state)
}

/// Binds `addr` and serves until the task is cancelled. Fails at startup
/// if the port is taken.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
