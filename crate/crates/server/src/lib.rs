//! HTTP analysis service. Slides are pyramid directories under one root;
//! analysis requests become jobs that run the tiled pipeline in the
//! background and leave a JSON result per job.

pub mod jobs;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tcr_core::annotations::Rect;
use tcr_core::pipeline::{run_pipeline, Analyzer, PipelineConfig, PipelineOutput};
use tcr_core::raster::RgbImage;
use tcr_core::slide::{SlideError, SlidePyramid, MANIFEST_FILE};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use jobs::{JobError, JobRecord, JobStatus, JobStore, Submitted};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("slide root {path}: {source}")]
    SlideRoot { path: PathBuf, source: std::io::Error },
    #[error("slide {id}: {source}")]
    Slide { id: String, source: SlideError },
    #[error(transparent)]
    Jobs(#[from] JobError),
    #[error(transparent)]
    Pipeline(#[from] tcr_core::pipeline::PipelineError),
    #[error("listen on {addr}: {source}")]
    Listen { addr: SocketAddr, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub slide_root: PathBuf,
    /// Journal and result files.
    pub state_dir: PathBuf,
    /// Pipeline config; without one, analysis requests are refused.
    pub model_config: Option<PathBuf>,
    /// Jobs allowed to run at once.
    pub concurrent_jobs: usize,
    /// Tile workers inside one job.
    pub pipeline_workers: usize,
    /// Viewer assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

pub struct AppState {
    pub slides: BTreeMap<String, Arc<SlidePyramid>>,
    pub analyzer: Option<Arc<Analyzer>>,
    pub jobs: JobStore,
    pub pipeline_workers: usize,
    permits: Arc<Semaphore>,
}

pub type Shared = Arc<AppState>;

/// Opens every pyramid directory directly under `root`.
pub fn scan_slides(root: &Path) -> Result<BTreeMap<String, Arc<SlidePyramid>>, ServerError> {
    let err = |source| ServerError::SlideRoot { path: root.to_path_buf(), source };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(err)? {
        let dir = entry.map_err(err)?.path();
        if !dir.join(MANIFEST_FILE).is_file() {
            continue;
        }
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let slide = SlidePyramid::open(&dir).map_err(|source| ServerError::Slide { id: id.clone(), source })?;
        out.insert(id, Arc::new(slide));
    }
    Ok(out)
}

impl AppState {
    /// Builds the state and restarts jobs left unfinished by a previous run.
    /// Must be called inside a Tokio runtime.
    pub fn start(
        slides: BTreeMap<String, Arc<SlidePyramid>>,
        analyzer: Option<Analyzer>,
        state_dir: &Path,
        concurrent_jobs: usize,
        pipeline_workers: usize,
    ) -> Result<Shared, ServerError> {
        let (jobs, requeue) = JobStore::open(state_dir)?;
        let state = Arc::new(AppState {
            slides,
            analyzer: analyzer.map(Arc::new),
            jobs,
            pipeline_workers: pipeline_workers.max(1),
            permits: Arc::new(Semaphore::new(concurrent_jobs.max(1))),
        });
        for r in requeue {
            tracing::info!(job = %r.id, "re-queued after restart");
            spawn_job(state.clone(), r.id);
        }
        Ok(state)
    }

    pub fn from_config(cfg: &ServerConfig) -> Result<Shared, ServerError> {
        let slides = scan_slides(&cfg.slide_root)?;
        let analyzer = match &cfg.model_config {
            Some(p) => Some(Analyzer::from_config(&PipelineConfig::load(p)?)?),
            None => None,
        };
        Self::start(slides, analyzer, &cfg.state_dir, cfg.concurrent_jobs, cfg.pipeline_workers)
    }
}

pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/slides", get(list_slides))
        .route("/api/slides/{id}", get(slide_info))
        .route("/api/slides/{id}/analyze", post(analyze))
        .route("/api/slides/{id}/tiles/{level}/{tx}/{ty}", get(tile))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/result", get(job_result))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(cfg: ServerConfig, addr: SocketAddr) -> Result<(), ServerError> {
    let state = AppState::from_config(&cfg)?;
    let app = router(state, cfg.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServerError::Listen { addr, source })?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app).await.map_err(|source| ServerError::Listen { addr, source })
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Serialize)]
struct LevelInfo {
    width: u64,
    height: u64,
    tiles_x: u64,
    tiles_y: u64,
}

#[derive(Serialize)]
struct SlideInfo {
    id: String,
    width: u64,
    height: u64,
    mpp: f64,
    tile_size: u32,
    levels: Vec<LevelInfo>,
}

fn slide_info_of(id: &str, s: &SlidePyramid) -> SlideInfo {
    let m = s.manifest();
    let t = u64::from(m.tile_size);
    SlideInfo {
        id: id.to_string(),
        width: m.width,
        height: m.height,
        mpp: m.mpp,
        tile_size: m.tile_size,
        levels: m
            .levels
            .iter()
            .map(|l| LevelInfo { width: l.width, height: l.height, tiles_x: l.width.div_ceil(t), tiles_y: l.height.div_ceil(t) })
            .collect(),
    }
}

async fn list_slides(State(st): State<Shared>) -> Json<Vec<SlideInfo>> {
    Json(st.slides.iter().map(|(id, s)| slide_info_of(id, s)).collect())
}

async fn slide_info(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match st.slides.get(&id) {
        Some(s) => Json(slide_info_of(&id, s)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown slide {id}")),
    }
}

/// Region in level-0 pixels. Signed so that negative origins are reported
/// as out of bounds rather than as malformed JSON.
#[derive(Debug, Clone, Copy, Deserialize)]
pub struct RegionRequest {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

#[derive(Debug, Default, Deserialize)]
pub struct AnalyzeRequest {
    #[serde(default)]
    pub region: Option<RegionRequest>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

fn checked_region(r: RegionRequest, s: &SlidePyramid) -> Option<Rect> {
    let (w, h) = (s.width() as i64, s.height() as i64);
    let ok = r.x >= 0 && r.y >= 0 && r.w > 0 && r.h > 0 && r.x + r.w <= w && r.y + r.h <= h;
    ok.then(|| Rect::new(r.x as u64, r.y as u64, r.w as u64, r.h as u64))
}

async fn analyze(State(st): State<Shared>, UrlPath(id): UrlPath<String>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(slide) = st.slides.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown slide {id}"));
    };
    let req: AnalyzeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        AnalyzeRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("bad request body: {e}")),
        }
    };
    let region = match req.region {
        None => slide.bounds(),
        Some(r) => match checked_region(r, slide) {
            Some(rect) => rect,
            None => {
                return error(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("region {},{},{},{} is outside the {}x{} slide", r.x, r.y, r.w, r.h, slide.width(), slide.height()),
                )
            }
        },
    };
    if st.analyzer.is_none() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model configuration loaded");
    }
    let key = req
        .idempotency_key
        .or_else(|| headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string));
    match st.jobs.submit(&id, region, key) {
        Ok(Submitted::New(r)) => {
            spawn_job(st.clone(), r.id.clone());
            (StatusCode::ACCEPTED, Json(json!({ "job_id": r.id }))).into_response()
        }
        Ok(Submitted::Existing(r)) => (StatusCode::ACCEPTED, Json(json!({ "job_id": r.id }))).into_response(),
        Err(e @ JobError::KeyConflict(_)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn list_jobs(State(st): State<Shared>) -> Json<Vec<JobRecord>> {
    Json(st.jobs.list())
}

async fn job_status(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match st.jobs.get(&id) {
        Some(r) => Json(r).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

async fn job_result(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(r) = st.jobs.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown job {id}"));
    };
    let (JobStatus::Done, Some(path)) = (r.status, &r.result) else {
        let mut body = json!({ "error": "result not available", "status": r.status });
        if let Some(e) = &r.error {
            body["job_error"] = json!(e);
        }
        return (StatusCode::CONFLICT, Json(body)).into_response();
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("reading result: {e}")),
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&img.data)?;
    }
    Ok(out)
}

async fn tile(
    State(st): State<Shared>,
    UrlPath((id, level, tx, ty)): UrlPath<(String, usize, u32, u32)>,
    headers: HeaderMap,
) -> Response {
    let Some(slide) = st.slides.get(&id).cloned() else {
        return error(StatusCode::NOT_FOUND, format!("unknown slide {id}"));
    };
    let entry = slide
        .manifest()
        .levels
        .get(level)
        .and_then(|l| l.tiles.iter().find(|t| t.x == tx && t.y == ty))
        .cloned();
    let Some(entry) = entry else {
        return error(StatusCode::NOT_FOUND, format!("no tile ({tx}, {ty}) at level {level}"));
    };
    let etag = format!("\"{:08x}-{level}-{tx}-{ty}\"", entry.crc32);
    if headers.get(header::IF_NONE_MATCH).is_some_and(|v| v.as_bytes() == etag.as_bytes()) {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response();
    }
    let png = tokio::task::spawn_blocking(move || {
        let img = slide.read_tile(level, tx, ty).map_err(|e| e.to_string())?;
        encode_png(&img).map_err(|e| e.to_string())
    })
    .await;
    match png {
        Ok(Ok(bytes)) => {
            let mut resp = bytes.into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            h.insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=31536000, immutable"));
            h.insert(header::ETAG, HeaderValue::from_str(&etag).expect("ascii etag"));
            resp
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Runs a queued job once a permit is free. Permits are handed out in
/// request order, so jobs start first in, first out.
pub fn spawn_job(st: Shared, id: String) {
    tokio::spawn(async move {
        let permit = st.permits.clone().acquire_owned().await.expect("semaphore is never closed");
        if let Err(e) = st.jobs.transition(&id, JobStatus::Running, |_| {}) {
            tracing::error!(job = %id, error = %e, "cannot start job");
            return;
        }
        let worker_state = st.clone();
        let job_id = id.clone();
        let outcome = tokio::task::spawn_blocking(move || execute(&worker_state, &job_id)).await;
        drop(permit);
        let done = match outcome {
            Ok(Ok(path)) => st.jobs.transition(&id, JobStatus::Done, |r| r.result = Some(path)),
            Ok(Err(msg)) => st.jobs.transition(&id, JobStatus::Failed, |r| r.error = Some(msg)),
            Err(e) => st.jobs.transition(&id, JobStatus::Failed, |r| r.error = Some(format!("worker panicked: {e}"))),
        };
        if let Err(e) = done {
            tracing::error!(job = %id, error = %e, "cannot finish job");
        }
    });
}

fn execute(st: &AppState, id: &str) -> Result<PathBuf, String> {
    let rec = st.jobs.get(id).ok_or("job vanished")?;
    let slide = st.slides.get(&rec.slide).ok_or_else(|| format!("unknown slide {}", rec.slide))?;
    let an = st.analyzer.as_ref().ok_or("no model configuration loaded")?;
    let progress = |done: usize, total: usize| st.jobs.set_progress(id, done, total);
    let out: PipelineOutput =
        run_pipeline(slide, &rec.region, an, st.pipeline_workers, Some(&progress)).map_err(|e| e.to_string())?;
    if out.failures.len() == out.tiles {
        let first = out.failures.first().map(|f| f.error.as_str()).unwrap_or("no tiles");
        return Err(format!("every tile failed; first error: {first}"));
    }
    let path = st.jobs.result_path(id);
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec(&out).map_err(|e| e.to_string())?;
    std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, &path)).map_err(|e| format!("writing result: {e}"))?;
    Ok(path)
}
