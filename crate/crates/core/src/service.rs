//! HTTP API over a loaded [`Engine`].
//!
//! | route                    | purpose                                    |
//! |--------------------------|--------------------------------------------|
//! | `GET /health`            | liveness and whether an index is loaded    |
//! | `GET /pages`             | indexed pages with their dimensions        |
//! | `GET /pages/:id/image`   | original page image bytes                  |
//! | `POST /queries`          | run a query (crop of a page, or an image)  |
//! | `GET /queries/:id`       | a recent query result                      |

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

use crate::error::Error;
use crate::geometry::BBox;
use crate::pipeline::Engine;
use crate::preprocess::{crop, CropRegion, RawImage};
use crate::spotting::{DetectionLine, PageLine, SpotResult};

const MAX_BODY_BYTES: usize = 32 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageInfo {
    pub page_id: String,
    pub width: u32,
    pub height: u32,
}

/// JSON body of `POST /queries`: either a crop of an indexed page or an
/// encoded image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    #[serde(default)]
    pub page_id: Option<String>,
    #[serde(default, rename = "box")]
    pub bbox: Option<BBox>,
    #[serde(default)]
    pub image_base64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: String,
    pub level_k: u8,
    pub query_size: [u32; 2],
    pub elapsed_ms: f64,
    pub detections: Vec<DetectionLine>,
    pub pages: Vec<PageLine>,
}

impl QueryResponse {
    pub fn from_result(r: &SpotResult) -> Self {
        let mut run = crate::spotting::RunResults::default();
        run.add_result(r);
        Self {
            query_id: r.query_id.clone(),
            level_k: r.level_k,
            query_size: [r.query_size.0, r.query_size.1],
            elapsed_ms: r.elapsed.as_secs_f64() * 1000.0,
            detections: run.detections.remove(&r.query_id).unwrap_or_default(),
            pages: run.pages.remove(&r.query_id).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }

    fn unavailable() -> Self {
        Self(StatusCode::SERVICE_UNAVAILABLE, "no index loaded".into())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownPageId(_) | Error::UnknownQueryId(_) => StatusCode::NOT_FOUND,
            Error::InvalidInput(_) | Error::DimensionExceeded { .. } | Error::ShapeMismatch(_) | Error::Image(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

/// Insertion-ordered result cache holding at most `capacity` entries.
struct ResultCache {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, Arc<QueryResponse>>,
}

impl ResultCache {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            order: VecDeque::new(),
            entries: HashMap::new(),
        }
    }

    fn get(&self, id: &str) -> Option<Arc<QueryResponse>> {
        self.entries.get(id).cloned()
    }

    fn insert(&mut self, id: String, value: Arc<QueryResponse>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.insert(id.clone(), value).is_none() {
            self.order.push_back(id);
            while self.order.len() > self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.entries.remove(&old);
                }
            }
        }
    }
}

pub struct AppState {
    engine: Option<Arc<Engine>>,
    permits: Arc<Semaphore>,
    cache: Mutex<ResultCache>,
    max_query_side: u32,
}

impl AppState {
    /// `engine` is `None` when serving without an index; data routes then answer 503.
    pub fn new(engine: Option<Engine>, max_inflight: usize, cache_size: usize, max_query_side: u32) -> Self {
        Self {
            engine: engine.map(Arc::new),
            permits: Arc::new(Semaphore::new(max_inflight.max(1))),
            cache: Mutex::new(ResultCache::new(cache_size)),
            max_query_side,
        }
    }

    pub fn from_engine(engine: Engine) -> Self {
        let s = engine.config.service.clone();
        Self::new(Some(engine), s.max_inflight, s.cache_size, s.max_query_side)
    }

    fn engine(&self) -> Result<&Arc<Engine>, ApiError> {
        self.engine.as_ref().ok_or_else(ApiError::unavailable)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/pages", get(list_pages))
        .route("/pages/:id/image", get(page_image))
        .route("/queries", axum::routing::post(post_query))
        .route("/queries/:id", get(get_query))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "index_loaded": state.engine.is_some() }))
}

async fn list_pages(State(state): State<Arc<AppState>>) -> Result<Json<Vec<PageInfo>>, ApiError> {
    let engine = state.engine()?;
    Ok(Json(
        engine
            .index
            .catalog
            .pages
            .iter()
            .map(|p| PageInfo {
                page_id: p.page_id.clone(),
                width: p.width,
                height: p.height,
            })
            .collect(),
    ))
}

async fn page_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let engine = state.engine()?;
    let path = engine.page_image_path(&id)?.to_path_buf();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn get_query(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<QueryResponse>, ApiError> {
    let cached = state.cache.lock().expect("cache lock").get(&id);
    match cached {
        Some(r) => Ok(Json((*r).clone())),
        None => Err(Error::UnknownQueryId(id).into()),
    }
}

fn decode_image(bytes: &[u8]) -> Result<RawImage, ApiError> {
    image::load_from_memory(bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| ApiError::bad_request(format!("cannot decode query image: {e}")))
}

/// Resolves the request to a query image plus a content hash identifying it.
fn query_image(engine: &Engine, headers: &HeaderMap, body: &[u8]) -> Result<(RawImage, String), ApiError> {
    let json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map_or(false, |v| v.starts_with("application/json"));
    let mut hasher = Sha256::new();
    let image = if json {
        let req: QueryRequest =
            serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
        match (req.page_id, req.bbox, req.image_base64) {
            (Some(page_id), Some(b), None) => {
                let entry = engine.page_entry(&page_id)?;
                if b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || !b.contained_in(entry.width, entry.height) {
                    return Err(ApiError::bad_request(format!(
                        "box {:?} is empty or outside the {}x{} page",
                        [b.x, b.y, b.w, b.h],
                        entry.width,
                        entry.height
                    )));
                }
                hasher.update(b"crop\0");
                hasher.update(page_id.as_bytes());
                hasher.update(format!("\0{},{},{},{}", b.x, b.y, b.w, b.h).as_bytes());
                let page = engine.page_image(&page_id)?;
                crop(
                    &page,
                    &CropRegion {
                        x0: b.x as u32,
                        y0: b.y as u32,
                        width: b.w as u32,
                        height: b.h as u32,
                    },
                )
            }
            (None, None, Some(data)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(data.trim())
                    .map_err(|e| ApiError::bad_request(format!("bad base64: {e}")))?;
                let image = decode_image(&bytes)?;
                hasher.update(b"image\0");
                hasher.update(image.as_raw());
                image
            }
            _ => {
                return Err(ApiError::bad_request(
                    "give either page_id and box, or image_base64".to_string(),
                ))
            }
        }
    } else {
        let image = decode_image(body)?;
        hasher.update(b"image\0");
        hasher.update(image.as_raw());
        image
    };
    let (w, h) = image.dimensions();
    hasher.update(format!("\0{w}x{h}").as_bytes());
    Ok((image, hex::encode(&hasher.finalize()[..8])))
}

async fn post_query(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<QueryResponse>, ApiError> {
    let engine = state.engine()?.clone();
    let (image, query_id) = query_image(&engine, &headers, &body)?;
    let (w, h) = image.dimensions();
    if w.max(h) > state.max_query_side {
        return Err(ApiError::bad_request(format!(
            "query is {w}x{h}, larger than the {} px limit",
            state.max_query_side
        )));
    }
    if let Some(hit) = state.cache.lock().expect("cache lock").get(&query_id) {
        return Ok(Json((*hit).clone()));
    }
    let _permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::unavailable())?;
    let id = query_id.clone();
    let result = tokio::task::spawn_blocking(move || engine.spot(&id, &image))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let response = Arc::new(QueryResponse::from_result(&result));
    state
        .cache
        .lock()
        .expect("cache lock")
        .insert(query_id, response.clone());
    Ok(Json((*response).clone()))
}
