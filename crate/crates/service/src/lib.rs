//! HTTP API for browsing discovered parts and running generation jobs.
//!
//! Routes:
//! - `GET /api/parts?slot=&page=&page_size=` — catalog page
//! - `POST /api/jobs` — submit a generation request
//! - `GET /api/jobs/{id}` — job status, result and provenance
//! - `GET /api/images/{id}` — PNG of a generated image or exemplar thumbnail
//! - `GET /api/health`

pub mod catalog;
mod error;
pub mod jobs;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use partsmith::generation::{GenerationRequest, ImageGenerator};
use partsmith::token_codec::PartSpace;
use serde::Serialize;
use uuid::Uuid;

pub use catalog::{Catalog, CatalogPage, CatalogQuery, PartCatalogEntry};
pub use error::{Result, ServiceError};
pub use jobs::{Job, JobQueue, JobStatus};

pub const API_SCHEMA_VERSION: u32 = 1;
const IMMUTABLE: &str = "public, max-age=31536000, immutable";

pub struct AppState {
    pub catalog: Option<Catalog>,
    pub space: PartSpace,
    pub queue: Arc<JobQueue>,
    pub checkpoint_id: Option<String>,
}

pub struct ServiceConfig {
    pub state_dir: PathBuf,
    pub workers: usize,
    pub space: PartSpace,
    pub checkpoint_id: Option<String>,
}

/// Opens the job queue, starts `workers` generation workers and returns the
/// shared state. Must be called inside a tokio runtime.
pub fn start(cfg: ServiceConfig, catalog: Option<Catalog>, generator: Arc<dyn ImageGenerator>) -> Result<Arc<AppState>> {
    if let Some(c) = &catalog {
        let d = c.dictionary();
        if d.num_parts() != cfg.space.num_parts || d.num_variants() != cfg.space.num_variants {
            return Err(ServiceError::BadRequest(format!(
                "dictionary has {} parts x {} variants, model expects {} x {}",
                d.num_parts(),
                d.num_variants(),
                cfg.space.num_parts,
                cfg.space.num_variants
            )));
        }
    }
    let queue = Arc::new(JobQueue::open(&cfg.state_dir)?);
    queue.spawn_workers(generator, cfg.workers);
    Ok(Arc::new(AppState {
        catalog,
        space: cfg.space,
        queue,
        checkpoint_id: cfg.checkpoint_id,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/parts", get(list_parts))
        .route("/api/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/images/{id}", get(get_image))
        .route("/api/health", get(health))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn list_parts(State(s): State<Arc<AppState>>, Query(q): Query<CatalogQuery>) -> Result<Json<CatalogPage>> {
    let catalog = s
        .catalog
        .as_ref()
        .ok_or_else(|| ServiceError::Conflict("no part dictionary loaded".into()))?;
    Ok(Json(catalog.page(&q)?))
}

/// Checks a request against the part space, naming every offending code.
pub fn validate_request(request: &GenerationRequest, space: PartSpace) -> Result<()> {
    let comp = &request.composition;
    let mut offending: Vec<String> = comp
        .codes()
        .iter()
        .filter(|c| c.validate(space.num_parts, space.num_variants).is_err())
        .map(|c| c.to_string())
        .collect();
    if comp.num_parts() != space.num_parts {
        offending.push(format!(
            "composition has {} slots, expected {}",
            comp.num_slots(),
            space.num_slots()
        ));
    }
    if !offending.is_empty() {
        return Err(ServiceError::Validation {
            message: "invalid composition".into(),
            offending,
        });
    }
    request
        .validate(space.num_parts, space.num_variants)
        .map_err(|e| ServiceError::Validation {
            message: e.to_string(),
            offending: Vec::new(),
        })
}

#[derive(Serialize)]
struct Submitted {
    schema_version: u32,
    id: Uuid,
    status: JobStatus,
}

/// Codes in a raw JSON composition that fall outside the part space. Runs
/// before typed parsing so out-of-range codes are reported, not just rejected.
fn raw_offending_codes(body: &serde_json::Value, space: PartSpace) -> Vec<String> {
    let Some(codes) = body.get("composition").and_then(|c| c.as_array()) else {
        return Vec::new();
    };
    codes
        .iter()
        .filter_map(|c| {
            let slot = c.get("slot")?.as_i64()?;
            let variant = c.get("variant")?;
            let bad_slot = slot < 0 || slot > space.num_parts as i64;
            let bad_variant = match variant.as_i64() {
                Some(v) => v < 1 || v > space.num_variants as i64,
                None => !variant.is_null(),
            };
            (bad_slot || bad_variant).then(|| format!("{slot}:{variant}"))
        })
        .collect()
}

async fn submit_job(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response> {
    let bad_body = |e: serde_json::Error| ServiceError::BadRequest(format!("invalid request body: {e}"));
    let raw: serde_json::Value = serde_json::from_slice(&body).map_err(bad_body)?;
    let offending = raw_offending_codes(&raw, s.space);
    if !offending.is_empty() {
        return Err(ServiceError::Validation {
            message: "invalid composition".into(),
            offending,
        });
    }
    let request: GenerationRequest = serde_json::from_value(raw).map_err(bad_body)?;
    validate_request(&request, s.space)?;
    let job = s.queue.submit(request)?;
    let body = Submitted {
        schema_version: API_SCHEMA_VERSION,
        id: job.id,
        status: job.status,
    };
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, format!("/api/jobs/{}", job.id))],
        Json(body),
    )
        .into_response())
}

#[derive(Serialize)]
struct JobView {
    schema_version: u32,
    #[serde(flatten)]
    job: Job,
}

async fn get_job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let job = Uuid::parse_str(&id)
        .ok()
        .and_then(|u| s.queue.get(u))
        .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
    let view = JobView {
        schema_version: API_SCHEMA_VERSION,
        job,
    };
    Ok(([(header::CACHE_CONTROL, "no-store")], Json(view)).into_response())
}

async fn get_image(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let bytes = if let Some(thumb) = s.catalog.as_ref().and_then(|c| c.thumbnail_png(&id)) {
        thumb?
    } else {
        let path = s
            .queue
            .image_path(&id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {id}")))?;
        let s2 = path.clone();
        match tokio::fs::read(&path).await {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ServiceError::NotFound(format!("image {id}")))
            }
            Err(e) => return Err(ServiceError::io(&s2, e)),
        }
    };
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, IMMUTABLE)],
        bytes,
    )
        .into_response())
}

#[derive(Serialize)]
struct Health {
    schema_version: u32,
    status: &'static str,
    dictionary_loaded: bool,
    catalog_entries: usize,
    checkpoint_id: Option<String>,
    num_parts: usize,
    num_variants: usize,
    queued: usize,
    running: usize,
}

async fn health(State(s): State<Arc<AppState>>) -> Json<impl Serialize> {
    Json(Health {
        schema_version: API_SCHEMA_VERSION,
        status: "ok",
        dictionary_loaded: s.catalog.is_some(),
        catalog_entries: s.catalog.as_ref().map_or(0, Catalog::len),
        checkpoint_id: s.checkpoint_id.clone(),
        num_parts: s.space.num_parts,
        num_variants: s.space.num_variants,
        queued: s.queue.queued(),
        running: s.queue.running(),
    })
}
