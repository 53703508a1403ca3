//! HTTP/JSON surface over the [`Registry`].
//!
//! Every body the server writes is canonical JSON (or raw bytes for media
//! and bundles); every error is `{code, message}`. Handlers parse request
//! bodies themselves so that malformed input also gets a coded error, and
//! push the filesystem work onto the blocking pool.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, RawQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use fieldforge_core::canon;
use fieldforge_core::protocol::*;
use fieldforge_core::refdet::RefDetModel;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;
use uuid::Uuid;

use crate::error::{ApiError, ApiResult};
use crate::registry::{ObservationFilter, Registry, ServerConfig};

/// Request bodies above this are refused before reaching a handler.
const BODY_LIMIT: usize = 16 * MAX_CHUNK_SIZE;

type Shared = Arc<Registry>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.http_status())
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(code = %self.code, message = %self.message, "request failed");
        }
        (status, json_bytes(&self.body())).into_response()
    }
}

fn json_bytes<T: Serialize>(value: &T) -> ([(header::HeaderName, &'static str); 1], Vec<u8>) {
    let body = canon::to_vec(value).expect("wire types serialize");
    ([(header::CONTENT_TYPE, "application/json")], body)
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    (status, json_bytes(value)).into_response()
}

fn octets(bytes: Vec<u8>, content_type: &'static str) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ApiError::internal)?
}

fn body(raw: Result<Bytes, BytesRejection>) -> ApiResult<Bytes> {
    raw.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(ErrorCode::ChunkTooLarge, e.body_text())
        } else {
            ApiError::new(ErrorCode::BadRequest, e.body_text())
        }
    })
}

fn parse_json<T: DeserializeOwned>(raw: Result<Bytes, BytesRejection>) -> ApiResult<T> {
    let bytes = body(raw)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("invalid JSON body: {e}")))
}

fn parse_uuid(s: &str) -> ApiResult<Uuid> {
    Uuid::parse_str(s)
        .map_err(|_| ApiError::new(ErrorCode::BadRequest, format!("{s:?} is not a UUID")))
}

fn query_map(raw: Option<String>) -> HashMap<String, String> {
    raw.map(|q| {
        url::form_urlencoded::parse(q.as_bytes())
            .into_owned()
            .collect()
    })
    .unwrap_or_default()
}

pub fn router(registry: Shared) -> Router {
    Router::new()
        .route("/v1/projects", post(create_project).get(list_projects))
        .route("/v1/projects/{id}", get(project_info))
        .route("/v1/projects/{id}/manifest", get(manifest))
        .route(
            "/v1/projects/{id}/model",
            post(publish_model).get(check_model),
        )
        .route("/v1/projects/{id}/model/download", get(download_model))
        .route("/v1/projects/{id}/uploads", post(begin_upload))
        .route("/v1/projects/{id}/observations", get(list_observations))
        .route("/v1/projects/{id}/snapshots", post(export_snapshot))
        .route("/v1/projects/{id}/snapshots/{n}", get(get_snapshot))
        .route("/v1/uploads/{sid}", get(upload_status))
        .route("/v1/uploads/{sid}/chunks", put(put_chunk))
        .route("/v1/uploads/{sid}/complete", post(complete_upload))
        .route("/v1/observations/{oid}", get(get_observation))
        .route("/v1/observations/{oid}/media", get(get_media))
        .route("/v1/observations/{oid}/review", post(submit_review))
        .route("/v1/observations/{oid}/rescore", post(rescore))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such route") })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(registry)
}

async fn create_project(
    State(reg): State<Shared>,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let manifest = parse_json(raw)?;
    let info = blocking(move || reg.create_project(manifest)).await?;
    Ok(json(StatusCode::CREATED, &info))
}

async fn list_projects(State(reg): State<Shared>) -> ApiResult<Response> {
    let infos = blocking(move || {
        reg.project_ids()
            .iter()
            .map(|id| reg.project_info(id))
            .collect::<ApiResult<Vec<_>>>()
    })
    .await?;
    Ok(json(StatusCode::OK, &infos))
}

async fn project_info(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(json(StatusCode::OK, &reg.project_info(&id)?))
}

async fn manifest(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(json(StatusCode::OK, &reg.manifest(&id)?))
}

async fn publish_model(
    State(reg): State<Shared>,
    Path(id): Path<String>,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let bytes = body(raw)?;
    let info = blocking(move || reg.publish_model(&id, &bytes)).await?;
    Ok(json(StatusCode::CREATED, &info))
}

async fn check_model(
    State(reg): State<Shared>,
    Path(id): Path<String>,
    RawQuery(q): RawQuery,
) -> ApiResult<Response> {
    let current = match query_map(q).get("current").filter(|v| !v.is_empty()) {
        Some(v) => Some(
            semver::Version::parse(v)
                .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("current={v:?}: {e}")))?,
        ),
        None => None,
    };
    Ok(match reg.check_model_update(&id, current.as_ref())? {
        ModelUpdate::NoChange => StatusCode::NO_CONTENT.into_response(),
        ModelUpdate::NewBundle(info) => json(StatusCode::OK, &info),
    })
}

async fn download_model(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || reg.model_bytes(&id)).await?;
    Ok(octets(bytes, "application/x-tar"))
}

async fn begin_upload(
    State(reg): State<Shared>,
    Path(id): Path<String>,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let req: BeginUploadRequest = parse_json(raw)?;
    let session = blocking(move || reg.begin_upload(&id, &req)).await?;
    Ok(json(StatusCode::OK, &session))
}

async fn upload_status(State(reg): State<Shared>, Path(sid): Path<String>) -> ApiResult<Response> {
    Ok(json(StatusCode::OK, &reg.upload_status(parse_uuid(&sid)?)?))
}

async fn put_chunk(
    State(reg): State<Shared>,
    Path(sid): Path<String>,
    RawQuery(q): RawQuery,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let sid = parse_uuid(&sid)?;
    let offset = query_map(q)
        .get("offset")
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(|| {
            ApiError::new(ErrorCode::BadRequest, "offset query parameter is required")
        })?;
    let chunk = body(raw)?;
    let committed_offset = blocking(move || reg.put_chunk(sid, offset, &chunk)).await?;
    Ok(json(StatusCode::OK, &ChunkAck { committed_offset }))
}

async fn complete_upload(
    State(reg): State<Shared>,
    Path(sid): Path<String>,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let sid = parse_uuid(&sid)?;
    let record: ObservationRecord =
        parse_json(raw).map_err(|e| ApiError::new(ErrorCode::RecordInvalid, e.message))?;
    let observation_id = blocking(move || reg.complete_upload(sid, &record)).await?;
    Ok(json(StatusCode::OK, &CompleteResponse { observation_id }))
}

async fn list_observations(
    State(reg): State<Shared>,
    Path(id): Path<String>,
    RawQuery(q): RawQuery,
) -> ApiResult<Response> {
    let q = query_map(q);
    let bad =
        |k: &str, v: &str| ApiError::new(ErrorCode::BadRequest, format!("{k}={v:?} is not valid"));
    let mut filter = ObservationFilter::default();
    if let Some(v) = q.get("reviewed").filter(|v| !v.is_empty()) {
        filter.reviewed = Some(v.parse::<bool>().map_err(|_| bad("reviewed", v))?);
    }
    if let Some(v) = q.get("verdict").filter(|v| !v.is_empty()) {
        filter.verdict = Some(Verdict::parse(v).ok_or_else(|| bad("verdict", v))?);
    }
    let limit = match q.get("limit").filter(|v| !v.is_empty()) {
        Some(v) => Some(v.parse::<usize>().map_err(|_| bad("limit", v))?),
        None => None,
    };
    let cursor = q.get("cursor").filter(|v| !v.is_empty()).cloned();
    let page = reg.list_observations(&id, &filter, limit, cursor.as_deref())?;
    Ok(json(StatusCode::OK, &page))
}

fn media_url(oid: Uuid) -> String {
    format!("/v1/observations/{oid}/media")
}

async fn get_observation(
    State(reg): State<Shared>,
    Path(oid): Path<String>,
) -> ApiResult<Response> {
    let oid = parse_uuid(&oid)?;
    let observation = reg.observation(oid)?;
    Ok(json(
        StatusCode::OK,
        &ObservationView {
            observation,
            media_url: media_url(oid),
        },
    ))
}

async fn get_media(State(reg): State<Shared>, Path(oid): Path<String>) -> ApiResult<Response> {
    let oid = parse_uuid(&oid)?;
    let bytes = blocking(move || reg.media(oid)).await?;
    Ok(octets(bytes, "image/png"))
}

async fn submit_review(
    State(reg): State<Shared>,
    Path(oid): Path<String>,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let oid = parse_uuid(&oid)?;
    let request: ReviewRequest =
        parse_json(raw).map_err(|e| ApiError::new(ErrorCode::MalformedDecision, e.message))?;
    let observation = blocking(move || reg.submit_review(oid, request)).await?;
    Ok(json(
        StatusCode::OK,
        &ObservationView {
            observation,
            media_url: media_url(oid),
        },
    ))
}

#[derive(Serialize)]
struct RescoreResponse {
    observation_id: Uuid,
    server_detections: Vec<fieldforge_core::Detection>,
}

async fn rescore(
    State(reg): State<Shared>,
    Path(oid): Path<String>,
    raw: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let oid = parse_uuid(&oid)?;
    let bytes = body(raw)?;
    let model: Option<RefDetModel> = if bytes.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        Some(
            serde_json::from_slice(&bytes)
                .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("invalid model: {e}")))?,
        )
    };
    let server_detections = blocking(move || reg.rescore_observation(oid, model.as_ref())).await?;
    Ok(json(
        StatusCode::OK,
        &RescoreResponse {
            observation_id: oid,
            server_detections,
        },
    ))
}

async fn export_snapshot(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let snapshot = blocking(move || reg.export_snapshot(&id)).await?;
    Ok(json(StatusCode::CREATED, &snapshot))
}

async fn get_snapshot(
    State(reg): State<Shared>,
    Path((id, n)): Path<(String, String)>,
) -> ApiResult<Response> {
    let n = n
        .strip_suffix(".json")
        .unwrap_or(&n)
        .parse::<u64>()
        .map_err(|_| {
            ApiError::new(
                ErrorCode::BadRequest,
                format!("{n:?} is not a snapshot number"),
            )
        })?;
    let bytes = blocking(move || reg.snapshot_bytes(&id, n)).await?;
    Ok(octets(bytes, "application/json"))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    registry: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own thread and runtime, bound to a random local port.
/// Meant for tests and tools that drive the service from blocking code.
pub struct BackgroundServer {
    addr: SocketAddr,
    registry: Shared,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(data_dir: impl Into<PathBuf>, config: ServerConfig) -> std::io::Result<Self> {
        let registry = Arc::new(Registry::open(data_dir, config)?);
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let shared = registry.clone();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener =
                    TcpListener::from_std(std_listener).expect("listener registers with runtime");
                let _ = serve(listener, shared, async {
                    let _ = stopped.await;
                })
                .await;
            });
        });
        Ok(BackgroundServer {
            addr,
            registry,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}
