//! Thin async client for the map service.

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use gpmap_core::config::PipelineConfig;
use gpmap_core::eval::{ChamferReport, RmseReport, Slice};
use gpmap_core::frame::Frame;
use gpmap_core::global_field::FieldQueryResult;
use gpmap_core::pipeline::FrameStats;
use gpmap_core::wire::*;
use gpmap_core::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with an error body.
    #[error("{error} (HTTP {status})")]
    Api { status: u16, kind: String, error: String },
}

impl ClientError {
    pub fn kind(&self) -> &str {
        match self {
            ClientError::Http(_) => "http",
            ClientError::Api { kind, .. } => kind,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

async fn check(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await?;
    let body: ErrorBody = serde_json::from_str(&text).unwrap_or(ErrorBody {
        error: if text.is_empty() { status.to_string() } else { text },
        kind: if status == StatusCode::NOT_FOUND { "not_found" } else { "http" }.to_string(),
    });
    Err(ClientError::Api {
        status: status.as_u16(),
        kind: body.kind,
        error: body.error,
    })
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            http: reqwest::Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Ok(check(self.http.get(self.url(path)).send().await?).await?.json().await?)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(self.url(path)).json(body).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    async fn bytes(&self, path: &str) -> Result<Vec<u8>> {
        Ok(check(self.http.get(self.url(path)).send().await?).await?.bytes().await?.to_vec())
    }

    pub async fn health(&self) -> Result<()> {
        check(self.http.get(self.url("/health")).send().await?).await?;
        Ok(())
    }

    pub async fn config(&self) -> Result<PipelineConfig> {
        self.get("/config").await
    }

    pub async fn stats(&self) -> Result<MapStats> {
        self.get("/stats").await
    }

    /// Clear the map, optionally switching to a new configuration.
    pub async fn reset(&self, config: Option<&PipelineConfig>) -> Result<MapStats> {
        let req = self.http.post(self.url("/reset"));
        let req = match config {
            Some(c) => req.json(c),
            None => req,
        };
        Ok(check(req.send().await?).await?.json().await?)
    }

    pub async fn integrate(&self, frames: &[Frame]) -> Result<Vec<FrameStats>> {
        let req = FramesRequest {
            frames: frames.iter().map(FrameDto::from).collect(),
        };
        let resp: FramesResponse = self.post("/frames", &req).await?;
        Ok(resp.stats)
    }

    pub async fn query(&self, points: &[Vec3]) -> Result<Vec<FieldQueryResult>> {
        let resp: QueryResponse = self.post("/query", &QueryRequest { points: points_to_dto(points) }).await?;
        Ok(resp.results)
    }

    /// The current mesh as binary PLY.
    pub async fn mesh_ply(&self) -> Result<Vec<u8>> {
        self.bytes("/mesh").await
    }

    pub async fn slice(&self, req: &SliceRequest) -> Result<Slice> {
        self.post("/slice", req).await
    }

    pub async fn eval_rmse(&self, req: &RmseRequest) -> Result<RmseReport> {
        self.post("/eval/rmse", req).await
    }

    pub async fn eval_chamfer(&self, req: &ChamferRequest) -> Result<ChamferReport> {
        self.post("/eval/chamfer", req).await
    }

    pub async fn snapshot(&self) -> Result<Vec<u8>> {
        self.bytes("/snapshot").await
    }

    /// Replace the service's map with a stored snapshot.
    pub async fn load_snapshot(&self, bytes: Vec<u8>) -> Result<MapStats> {
        let resp = self.http.put(self.url("/snapshot")).body(bytes).send().await?;
        Ok(check(resp).await?.json().await?)
    }
}
