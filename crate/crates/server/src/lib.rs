//! HTTP/JSON front end for a single in-memory map.
//!
//! All heavy work runs on the blocking pool; one frame batch is integrated
//! at a time while queries share a read lock.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use gpmap_core::config::PipelineConfig;
use gpmap_core::eval::{self, ChamferReport, RmseReport, Slice};
use gpmap_core::pipeline::Mapper;
use gpmap_core::scene::Scene;
use gpmap_core::wire::*;
use gpmap_core::{ply, snapshot, Error, Vec3};

const BODY_LIMIT: usize = 1 << 30;

#[derive(Clone)]
pub struct AppState {
    mapper: Arc<RwLock<Mapper>>,
}

impl AppState {
    pub fn new(config: PipelineConfig) -> gpmap_core::Result<Self> {
        Ok(AppState {
            mapper: Arc::new(RwLock::new(Mapper::new(config)?)),
        })
    }
}

#[derive(Debug)]
pub enum ApiError {
    Core(Error),
    BadRequest(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Frame { source, .. } => status_of(source),
        Error::EmptyField => StatusCode::CONFLICT,
        Error::FactorizationFailure { .. } | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Core(e) => (
                status_of(&e),
                ErrorBody {
                    error: e.to_string(),
                    kind: e.kind().to_string(),
                },
            ),
            ApiError::BadRequest(msg) => (
                StatusCode::BAD_REQUEST,
                ErrorBody {
                    error: msg,
                    kind: "bad_request".into(),
                },
            ),
            ApiError::Internal(msg) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody {
                    error: msg,
                    kind: "internal".into(),
                },
            ),
        };
        if status.is_server_error() {
            tracing::error!(kind = %body.kind, "{}", body.error);
        }
        (status, Json(body)).into_response()
    }
}

/// JSON body whose rejections use the service's error format.
pub struct JsonBody<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| JsonBody(v))
            .map_err(|e: JsonRejection| ApiError::BadRequest(e.body_text()))
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn read<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Mapper) -> ApiResult<T> + Send + 'static,
{
    let mapper = state.mapper.clone();
    tokio::task::spawn_blocking(move || {
        let guard = mapper.read().map_err(|_| ApiError::Internal("map lock poisoned".into()))?;
        f(&guard)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn write<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Mapper) -> ApiResult<T> + Send + 'static,
{
    let mapper = state.mapper.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = mapper.write().map_err(|_| ApiError::Internal("map lock poisoned".into()))?;
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn map_stats(m: &Mapper) -> MapStats {
    MapStats {
        frames: m.frames_integrated(),
        voxel_size: m.config().voxel_size,
        leaves: m.grid().leaf_count(),
        voxels: m.grid().voxel_count(),
        active_leaves: m.grid().active_origins().len(),
        mesh_vertices: m.mesher().vertex_count(),
        mesh_triangles: m.mesher().triangle_count(),
        global_nodes: m.global().len(),
        global_trainings: m.global().training_count(),
    }
}

fn oracle(o: &OracleDto) -> ApiResult<impl Fn(&Vec3) -> f64 + Sync> {
    let scene = Scene::parse(&o.scene)?;
    if scene.primitives.is_empty() {
        return Err(Error::EmptyInput("oracle scene").into());
    }
    let t = o.time;
    Ok(move |p: &Vec3| scene.sdf(p, t))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn get_config(State(s): State<AppState>) -> ApiResult<Json<PipelineConfig>> {
    read(&s, |m| Ok(Json(m.config().clone()))).await
}

async fn reset(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<MapStats>> {
    let config: Option<PipelineConfig> = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        Some(serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?)
    };
    write(&s, move |m| {
        match config {
            Some(c) => *m = Mapper::new(c)?,
            None => m.reset(),
        }
        Ok(Json(map_stats(m)))
    })
    .await
}

async fn stats(State(s): State<AppState>) -> ApiResult<Json<MapStats>> {
    read(&s, |m| Ok(Json(map_stats(m)))).await
}

async fn frames(State(s): State<AppState>, JsonBody(req): JsonBody<FramesRequest>) -> ApiResult<Json<FramesResponse>> {
    write(&s, move |m| {
        let mut stats = Vec::with_capacity(req.frames.len());
        for (i, f) in req.frames.iter().enumerate() {
            let frame = f.to_frame().map_err(|e| e.in_frame(m.frames_integrated() + i))?;
            stats.push(m.integrate_frame(&frame)?);
        }
        Ok(Json(FramesResponse { stats }))
    })
    .await
}

async fn query(State(s): State<AppState>, JsonBody(req): JsonBody<QueryRequest>) -> ApiResult<Json<QueryResponse>> {
    read(&s, move |m| {
        let results = m.query_batch(&points_from_dto(&req.points))?;
        Ok(Json(QueryResponse { results }))
    })
    .await
}

async fn mesh(State(s): State<AppState>) -> ApiResult<Response> {
    let bytes = read(&s, |m| {
        let mut buf = Vec::new();
        ply::write_mesh_to(&m.mesh(), m.config().property, &mut buf)?;
        Ok(buf)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn slice(State(s): State<AppState>, JsonBody(req): JsonBody<SliceRequest>) -> ApiResult<Json<Slice>> {
    read(&s, move |m| {
        let out = match &req.oracle {
            Some(o) => {
                let f = oracle(o)?;
                eval::slice(m, &req.spec, Some(&f))?
            }
            None => eval::slice(m, &req.spec, None)?,
        };
        Ok(Json(out))
    })
    .await
}

async fn eval_rmse(State(s): State<AppState>, JsonBody(req): JsonBody<RmseRequest>) -> ApiResult<Json<RmseReport>> {
    read(&s, move |m| {
        let f = oracle(&req.oracle)?;
        Ok(Json(eval::distance_rmse(m, &f, &req.region, req.resolution, (req.band[0], req.band[1]))?))
    })
    .await
}

async fn eval_chamfer(State(s): State<AppState>, JsonBody(req): JsonBody<ChamferRequest>) -> ApiResult<Json<ChamferReport>> {
    read(&s, move |m| {
        let reference = points_from_dto(&req.reference);
        Ok(Json(eval::chamfer_mesh(&m.mesh(), &reference, req.samples, req.threshold)?))
    })
    .await
}

async fn get_snapshot(State(s): State<AppState>) -> ApiResult<Response> {
    let bytes = read(&s, |m| Ok(snapshot::to_bytes(m))).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn put_snapshot(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<MapStats>> {
    write(&s, move |m| {
        *m = snapshot::read_from(body.as_ref())?;
        Ok(Json(map_stats(m)))
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/config", get(get_config))
        .route("/reset", post(reset))
        .route("/stats", get(stats))
        .route("/frames", post(frames))
        .route("/query", post(query))
        .route("/mesh", get(mesh))
        .route("/slice", post(slice))
        .route("/eval/rmse", post(eval_rmse))
        .route("/eval/chamfer", post(eval_chamfer))
        .route("/snapshot", get(get_snapshot).put(put_snapshot))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serve until the task is dropped or aborted.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Bind `addr` (port 0 picks a free port) and serve in the background.
pub async fn spawn(addr: SocketAddr, config: PipelineConfig) -> gpmap_core::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let state = AppState::new(config)?;
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::debug!(%local, "map service listening");
    Ok((local, tokio::spawn(serve(listener, state))))
}
