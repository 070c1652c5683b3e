use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use vizarel_core::{EmbeddingError, IngestError, ViewportError};

/// Every machine-readable code the API can return.
pub const ERROR_CODES: &[&str] = &[
    // service
    "UNKNOWN_SESSION",
    "SESSION_NOT_READY",
    "INVALID_REQUEST",
    "UNKNOWN_ROUTE",
    "INTERNAL",
    // ingest
    "IO_ERROR",
    "MALFORMED_RECORD",
    "SCHEMA_VIOLATION",
    "EMPTY_LOG",
    "DIMENSION_MISMATCH",
    // embedding
    "TOO_FEW_POINTS",
    "CALIBRATION_FAILURE",
    "INVALID_CONFIG",
    "EMPTY_SESSION",
    "CANCELLED",
    // viewport engine
    "EPISODE_NOT_FOUND",
    "NOT_FOUND",
    "MISSING_VALUE_ESTIMATE",
    "NO_RENDERS",
    "NO_COMPONENTS",
    "EMPTY_SELECTION",
    "SELECTION_TOO_SMALL",
    "STREAM_UNAVAILABLE",
    "DEGENERATE_POLYGON",
    "INCOMPATIBLE_SPEC",
    "UNKNOWN_SELECTION",
    "UNKNOWN_VIEWPORT",
    "MISSING_BINDING",
    "EMBEDDING_NOT_READY",
    "EMBEDDING_MISMATCH",
    "INVALID_PARAMETER",
];

/// Wire form: `{"code": ..., "message": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("unknown session `{id}`"))
    }

    pub fn not_ready(id: &str, status: &str) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "SESSION_NOT_READY",
            format!("session `{id}` is {status}"),
        )
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "INVALID_REQUEST", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.to_string(),
            message: self.message.clone(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.body() });
        (self.status, Json(body)).into_response()
    }
}

impl From<ViewportError> for ApiError {
    fn from(e: ViewportError) -> Self {
        use ViewportError::*;
        let status = match &e {
            EpisodeNotFound(_) | NotFound(_) | UnknownSelection(_) | UnknownViewport(_) => {
                StatusCode::NOT_FOUND
            }
            EmbeddingNotReady => StatusCode::CONFLICT,
            DegeneratePolygon(_) | IncompatibleSpec(_) | MissingBinding(_) | InvalidParameter(_) => {
                StatusCode::BAD_REQUEST
            }
            MissingValueEstimate | NoRenders | NoComponents | EmptySelection
            | SelectionTooSmall(_) | StreamUnavailable(_) | EmbeddingMismatch => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string())
    }
}

impl From<EmbeddingError> for ApiError {
    fn from(e: EmbeddingError) -> Self {
        let status = match e {
            EmbeddingError::Cancelled => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.code(), e.to_string())
    }
}
