//! HTTP service for the blinded reader study.
//!
//! | method | path                      | body / response                         |
//! |--------|---------------------------|-----------------------------------------|
//! | GET    | `/api/session/next`       | `{done, item_id?, image_png?}`          |
//! | POST   | `/api/session/annotation` | [`AnnotationPayload`] → [`Ack`]         |
//! | GET    | `/api/session/progress`   | `{annotated, total}`                    |
//!
//! Every request carries `Authorization: Bearer <token>`. `image_png` is a
//! base64 8-bit grayscale PNG. Errors are `{error, message}` where `error` is
//! one of `unauthorized`, `malformed_request`, `invalid_mask`, `out_of_range`,
//! `mask_shape`, `unknown_item`, `already_annotated`, `internal`.

mod config;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sparse_ct_core::io::{read_png16, read_raw_image, render_png8};
use sparse_ct_core::mask::RleMask;
use sparse_ct_core::study::{Annotation, Scores, StudyStore};
use sparse_ct_core::tomo::WindowSpec;
use sparse_ct_core::ImageGrid;
use thiserror::Error;
use tower_http::services::ServeDir;

pub use config::{read_tokens, write_tokens, ServiceConfig, TokenFile, MIN_TOKEN_HEX};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] sparse_ct_core::Error),
}

/// Shared server state. The store lock is the single serialization point.
#[derive(Debug)]
pub struct AppState {
    store: Mutex<StudyStore>,
    readers: HashMap<String, String>,
    window: WindowSpec,
}

impl AppState {
    /// Wraps an open store. Every reader in `tokens` must have a presentation
    /// list in the store.
    pub fn new(store: StudyStore, tokens: &TokenFile) -> Result<Self, ServiceError> {
        for reader in tokens.keys() {
            if store.presentation(reader).is_none() {
                return Err(ServiceError::Config(format!(
                    "reader {reader} is not part of the study"
                )));
            }
        }
        Ok(AppState {
            readers: config::token_index(tokens)?,
            store: Mutex::new(store),
            window: WindowSpec::LUNG,
        })
    }

    /// Opens the store (repairing a torn tail) and the token file.
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let store = StudyStore::open(&cfg.store)?;
        let tokens = read_tokens(&cfg.tokens)?;
        AppState::new(store, &tokens)
    }

    fn reader(&self, headers: &HeaderMap) -> Result<String, ApiError> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(ApiError::unauthorized)?;
        self.readers
            .get(token)
            .cloned()
            .ok_or_else(ApiError::unauthorized)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StudyStore> {
        // A panic while holding the lock cannot leave the store half-updated:
        // the index changes only after a successful append.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextItem {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationPayload {
    pub item_id: String,
    pub quality: u8,
    pub confidence: u8,
    pub artifacts: u8,
    pub mask: RleMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressBody {
    pub annotated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    pub annotated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    reason: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, reason: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            reason,
            message: message.into(),
        }
    }

    fn unauthorized() -> Self {
        ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or unknown bearer token",
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<sparse_ct_core::Error> for ApiError {
    fn from(e: sparse_ct_core::Error) -> Self {
        use sparse_ct_core::Error as E;
        let (status, reason) = match &e {
            E::OutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_range"),
            E::ShapeMismatch(_) => (StatusCode::UNPROCESSABLE_ENTITY, "mask_shape"),
            E::NotFound(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            E::Conflict(_) => (StatusCode::CONFLICT, "already_annotated"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, reason, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(ErrorBody {
            error: self.reason.into(),
            message: self.message,
        });
        if self.status == StatusCode::UNAUTHORIZED {
            (self.status, [(header::WWW_AUTHENTICATE, "Bearer")], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

/// Study images are 16-bit normalized PNGs or raw float grids with a sidecar.
fn load_image(path: &Path) -> sparse_ct_core::Result<ImageGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png16(path),
        _ => read_raw_image(path),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn next_item(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Json<NextItem>, ApiError> {
    let reader = state.reader(&headers)?;
    blocking(move || {
        let item = state.lock().next_item(&reader).cloned();
        let Some(item) = item else {
            return Ok(NextItem {
                done: true,
                item_id: None,
                image_png: None,
            });
        };
        let png = render_png8(&load_image(&item.image)?, state.window)?;
        Ok(NextItem {
            done: false,
            item_id: Some(item.item_id),
            image_png: Some(base64::engine::general_purpose::STANDARD.encode(png)),
        })
    })
    .await
    .map(Json)
}

async fn progress(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Json<ProgressBody>, ApiError> {
    let reader = state.reader(&headers)?;
    let p = state
        .lock()
        .progress(&reader)
        .ok_or_else(|| ApiError::internal("reader has no presentation list"))?;
    Ok(Json(ProgressBody {
        annotated: p.annotated,
        total: p.total,
    }))
}

async fn submit_annotation(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<Ack>, ApiError> {
    let reader = state.reader(&headers)?;
    let payload: AnnotationPayload = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))?;
    let mask = payload
        .mask
        .decode()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_mask", e.to_string()))?;
    let scores = Scores {
        quality: payload.quality,
        confidence: payload.confidence,
        artifacts: payload.artifacts,
    };
    let ann = Annotation::new(&reader, &payload.item_id, scores, mask);
    blocking(move || {
        let mut store = state.lock();
        store.record_annotation(ann)?;
        let p = store
            .progress(&reader)
            .ok_or_else(|| ApiError::internal("reader has no presentation list"))?;
        Ok(Ack {
            ok: true,
            annotated: p.annotated,
            total: p.total,
        })
    })
    .await
    .map(Json)
}

/// API routes, plus the UI bundle at `/` when `ui_dir` is given.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session/next", get(next_item))
        .route("/api/session/annotation", post(submit_annotation))
        .route("/api/session/progress", get(progress))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Runs the service until Ctrl-C.
pub async fn serve(cfg: &ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::open(cfg)?);
    let app = router(state, cfg.ui_dir.as_deref());
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port)
        .parse()
        .map_err(|e| ServiceError::Config(format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Io {
            path: PathBuf::from(addr.to_string()),
            source: e,
        })?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Io {
            path: PathBuf::from(addr.to_string()),
            source: e,
        })
}

/// Words in a response body that would tell a reader how an image was made:
/// rendition names, the word "views", and any standalone token equal to a
/// view count. Tokens are split on non-alphanumeric characters, so base64
/// payload text only matches when a view count is delimited on both sides.
pub fn blinding_leaks(body: &str, view_levels: &[usize]) -> Vec<String> {
    let lower = body.to_ascii_lowercase();
    let mut leaks: Vec<String> = ["sparse", "processed", "views", "rendition"]
        .into_iter()
        .filter(|w| lower.contains(w))
        .map(String::from)
        .collect();
    let counts: Vec<String> = view_levels.iter().map(|v| v.to_string()).collect();
    leaks.extend(
        lower
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| counts.iter().any(|c| c == t))
            .map(String::from),
    );
    leaks
}
