use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] meed::Error),
}

/// Errors returned to HTTP clients as `{"error": {"code", "message"}}`.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("utterance is empty")]
    EmptyUtterance,
    #[error("{0}")]
    BadRequest(String),
    #[error("server is busy, retry later")]
    Busy,
    #[error("session limit reached")]
    SessionLimit,
    /// Details are logged, never sent.
    #[error("internal error")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::EmptyUtterance => "empty_utterance",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Busy => "busy",
            ApiError::SessionLimit => "session_limit",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::EmptyUtterance | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Busy | ApiError::SessionLimit => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<meed::Error> for ApiError {
    fn from(e: meed::Error) -> Self {
        match e {
            meed::Error::EmptyUtterance => ApiError::EmptyUtterance,
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(detail) = &self {
            log::error!("request failed: {detail}");
        }
        let body = json!({ "error": { "code": self.code(), "message": self.to_string() } });
        (self.status(), Json(body)).into_response()
    }
}
