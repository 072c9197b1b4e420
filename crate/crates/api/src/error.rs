use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use mta_core::error::ErrorClass;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Engine(#[from] mta_core::Error),
    #[error("missing, unknown or expired token")]
    Unauthorized,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("a request with this idempotency key is still in progress")]
    InFlight,
    #[error("internal: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Engine(e) => match e.class() {
                ErrorClass::Invalid => StatusCode::BAD_REQUEST,
                ErrorClass::Unauthorized => StatusCode::UNAUTHORIZED,
                ErrorClass::Forbidden => StatusCode::FORBIDDEN,
                ErrorClass::NotFound => StatusCode::NOT_FOUND,
                ErrorClass::Conflict => StatusCode::CONFLICT,
                ErrorClass::Rejected => StatusCode::UNPROCESSABLE_ENTITY,
                ErrorClass::Internal => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::InFlight => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (code, details) = match self {
            ApiError::Engine(mta_core::Error::Validation(v)) => {
                ("validation_failed", serde_json::to_value(v).unwrap_or(Value::Null))
            }
            ApiError::Engine(e) => (e.code(), serde_json::json!({ "retryable": e.is_retryable() })),
            ApiError::Unauthorized => ("unauthorized", Value::Null),
            ApiError::BadRequest(_) => ("bad_request", Value::Null),
            ApiError::InFlight => ("in_flight", serde_json::json!({ "retryable": true })),
            ApiError::Internal(_) => ("internal", Value::Null),
        };
        ErrorBody { code: code.into(), message: self.to_string(), details }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
