//! HTTP service for vizarel: sessions, embedding jobs, selections,
//! viewports and state renders under `/api/v1`.

pub mod error;
pub mod state;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Deserialize;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};
use tower_http::services::ServeDir;
use vizarel_core::viewport::ViewportQuery;
use vizarel_core::{EmbeddingConfig, ViewportDescriptor};

pub use error::{ApiError, ErrorBody, ERROR_CODES};
pub use state::{
    content_digest, AppState, EmbeddingStatus, EmbeddingView, Event, SelectionRequest,
    ServerConfig, SessionHandle, SessionStatus,
};

pub const API_PREFIX: &str = "/api/v1";
const UPLOAD_LIMIT: usize = 512 * 1024 * 1024;

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route(
            "/sessions",
            get(list_sessions)
                .post(create_session)
                .layer(DefaultBodyLimit::max(UPLOAD_LIMIT)),
        )
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/embedding", get(get_embedding).post(post_embedding))
        .route("/sessions/{id}/selections", post(post_selection))
        .route("/sessions/{id}/viewports", get(list_viewports).post(post_viewport))
        .route("/sessions/{id}/viewports/{vid}", get(get_viewport))
        .route("/sessions/{id}/viewports/{vid}/data", get(get_viewport_data))
        .route("/sessions/{id}/viewport-data", post(post_viewport_data))
        .route("/sessions/{id}/render/{episode}/{t}", get(get_render))
        .route("/events", get(events))
        .fallback(unknown_route);

    let app = Router::new().nest(API_PREFIX, api);
    let app = match &state.config().ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(index)).fallback(unknown_route),
    };
    app.with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

async fn unknown_route(req: Request) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "UNKNOWN_ROUTE",
        format!("no route for {} {}", req.method(), req.uri().path()),
    )
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

const INDEX_HTML: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>vizarel</title></head>
<body>
<h1>vizarel</h1>
<p>No UI bundle configured; start the server with <code>--ui-dir</code> to serve one.</p>
<p>The API lives under <a href="/api/v1/sessions"><code>/api/v1</code></a>.</p>
</body></html>
"#;

/// JSON response with compact serde_json encoding, so identical values give
/// identical bytes.
fn json<T: serde::Serialize>(status: StatusCode, value: &T) -> Result<Response, ApiError> {
    let body = serde_json::to_vec(value).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((status, [(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn parse_body<'a, T: Deserialize<'a>>(bytes: &'a [u8], what: &str) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("{what}: {e}")))
}

async fn list_sessions(State(state): State<AppState>) -> Result<Response, ApiError> {
    json(StatusCode::OK, &state.handles())
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    json(StatusCode::OK, &state.session(&id)?.handle())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathUpload {
    path: PathBuf,
    name: Option<String>,
}

#[derive(Deserialize)]
struct UploadParams {
    name: Option<String>,
}

/// Accepts a multipart upload (first file field, optional `name` field), a
/// JSON `{"path": ...}` naming a file on the server, or the raw log as body.
async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    params: Result<Query<UploadParams>, QueryRejection>,
    req: Request,
) -> Result<Response, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let query_name = params.ok().and_then(|Query(p)| p.name);

    let result = if content_type.starts_with("multipart/form-data") {
        let mut multipart = Multipart::from_request(req, &state)
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let mut name = query_name;
        let mut log: Option<Vec<u8>> = None;
        while let Some(field) = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?
        {
            if field.name() == Some("name") && field.file_name().is_none() {
                name = Some(field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?);
                continue;
            }
            if log.is_none() {
                if name.is_none() {
                    name = field.file_name().map(str::to_string);
                }
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                log = Some(bytes.to_vec());
            }
        }
        let log = log.ok_or_else(|| ApiError::bad_request("multipart upload carries no log file"))?;
        let state = state.clone();
        blocking(move || state.create_from_bytes(log, name)).await?
    } else {
        let body = Bytes::from_request(req, &state)
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        if content_type.starts_with("application/json") {
            let upload: PathUpload = parse_body(&body, "session request")?;
            let state = state.clone();
            blocking(move || state.create_from_path(&upload.path, upload.name.or(query_name))).await?
        } else {
            let state = state.clone();
            blocking(move || state.create_from_bytes(body.to_vec(), query_name)).await?
        }
    };
    let (handle, created) = result;
    let status = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    json(status, &handle)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn get_embedding(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    json(StatusCode::OK, &state.session(&id)?.embedding_view())
}

async fn post_embedding(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.session(&id)?;
    let config: EmbeddingConfig = if body.iter().all(u8::is_ascii_whitespace) {
        EmbeddingConfig::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "INVALID_CONFIG", format!("embedding config: {e}"))
        })?
    };
    json(StatusCode::ACCEPTED, &state.request_embedding(&id, config)?)
}

async fn post_selection(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let request = SelectionRequest::from_json(&body)?;
    json(StatusCode::CREATED, &entry.create_selection(request)?)
}

async fn list_viewports(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    json(StatusCode::OK, &state.session(&id)?.viewports())
}

async fn post_viewport(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let descriptor: ViewportDescriptor = parse_body(&body, "viewport descriptor")?;
    let viewport_id = entry.create_viewport(descriptor)?;
    json(StatusCode::CREATED, &serde_json::json!({ "viewport_id": viewport_id }))
}

async fn get_viewport(
    State(state): State<AppState>,
    Path((id, vid)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    json(StatusCode::OK, &state.session(&id)?.viewport(&vid)?)
}

fn query_params(query: Result<Query<ViewportQuery>, QueryRejection>) -> Result<ViewportQuery, ApiError> {
    query.map(|Query(q)| q).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "INVALID_PARAMETER", e.body_text())
    })
}

async fn get_viewport_data(
    State(state): State<AppState>,
    Path((id, vid)): Path<(String, String)>,
    query: Result<Query<ViewportQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let query = query_params(query)?;
    let descriptor = entry.viewport(&vid)?;
    json(StatusCode::OK, &entry.viewport_data(&descriptor, &query)?)
}

/// Builds a payload for a descriptor sent in the body without storing it.
async fn post_viewport_data(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<ViewportQuery>, QueryRejection>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let entry = state.session(&id)?;
    let query = query_params(query)?;
    let descriptor: ViewportDescriptor = parse_body(&body, "viewport descriptor")?;
    json(StatusCode::OK, &entry.viewport_data(&descriptor, &query)?)
}

async fn get_render(
    State(state): State<AppState>,
    Path((id, episode, t)): Path<(String, usize, usize)>,
) -> Result<Response, ApiError> {
    let path = state.session(&id)?.render_path(episode, t)?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "NOT_FOUND",
            format!("render for ({episode}, {t}) unreadable: {e}"),
        )
    })?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

async fn events(
    State(state): State<AppState>,
) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let stream = BroadcastStream::new(state.subscribe()).filter_map(|msg| {
        let event = msg.ok()?;
        let name = match event {
            Event::Session { .. } => "session",
            Event::Embedding { .. } => "embedding",
        };
        let data = serde_json::to_string(&event).ok()?;
        Some(Ok(SseEvent::default().event(name).data(data)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
