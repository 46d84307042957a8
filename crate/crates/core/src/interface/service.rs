//! JSON-over-HTTP rerank service.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{EmbeddingProvider, HashEmbedder, TextItem};
use crate::error::Error;
use crate::evalkit::{rank_passages, RankMode};
use crate::inference::IterConfig;
use crate::model::{Checkpoint, Ranker};

/// Default cap on passages per request.
pub const DEFAULT_MAX_PASSAGES: usize = 1000;

const BODY_LIMIT_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PassageInput {
    Text(String),
    Item { id: String, text: String },
}

impl PassageInput {
    fn text(&self) -> &str {
        match self {
            Self::Text(t) => t,
            Self::Item { text, .. } => text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query: String,
    pub passages: Vec<PassageInput>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub mode: RankMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub index: usize,
    pub id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub results: Vec<RerankResult>,
    pub rounds: usize,
    pub model_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub status: u16,
    pub message: String,
}

impl ServiceError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status, self.message)
    }
}

impl std::error::Error for ServiceError {}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Precondition(_) | Error::Format(_) | Error::Domain(_) => 400,
            _ => 500,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Loaded weights plus everything needed to serve them. Immutable once built.
pub struct Engine {
    pub ranker: Ranker,
    pub provider: Box<dyn EmbeddingProvider>,
    pub iter: IterConfig,
    pub max_passages: usize,
    pub model_id: String,
    pub config_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Engine {
    /// Engine over the hash embedder matching the model dimension.
    pub fn new(ranker: Ranker, iter: IterConfig) -> crate::Result<Self> {
        let provider = HashEmbedder::new(ranker.config().dim)?;
        Self::with_provider(ranker, Box::new(provider), iter)
    }

    pub fn with_provider(ranker: Ranker, provider: Box<dyn EmbeddingProvider>, iter: IterConfig) -> crate::Result<Self> {
        iter.validate()?;
        if provider.dim() != ranker.config().dim {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match model dimension {}",
                provider.dim(),
                ranker.config().dim
            )));
        }
        let weights = Checkpoint::from_ranker(&ranker).to_json()?;
        let config = serde_json::to_string(ranker.config())?;
        Ok(Self {
            model_id: format!("listcon-{}", &sha256_hex(weights.as_bytes())[..12]),
            config_hash: sha256_hex(config.as_bytes()),
            ranker,
            provider,
            iter,
            max_passages: DEFAULT_MAX_PASSAGES,
        })
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            model_id: self.model_id.clone(),
            config_hash: self.config_hash.clone(),
        }
    }
}

pub fn handle_rerank(request: &RerankRequest, engine: &Engine) -> Result<RerankResponse, ServiceError> {
    let start = Instant::now();
    let n = request.passages.len();
    if n == 0 {
        return Err(ServiceError::new(400, "passages must not be empty"));
    }
    if n > engine.max_passages {
        return Err(ServiceError::new(
            413,
            format!("{n} passages exceed the limit of {}", engine.max_passages),
        ));
    }
    if let Some(k) = request.top_k {
        if k == 0 || k > n {
            return Err(ServiceError::new(400, format!("top_k must lie in 1..={n}, got {k}")));
        }
    }
    let ids: Vec<String> = request
        .passages
        .iter()
        .enumerate()
        .map(|(i, p)| match p {
            PassageInput::Text(_) => i.to_string(),
            PassageInput::Item { id, .. } => id.clone(),
        })
        .collect();
    let items: Vec<TextItem<'_>> = request
        .passages
        .iter()
        .zip(&ids)
        .map(|(p, id)| TextItem { id, text: p.text() })
        .collect();
    let query = TextItem {
        id: "query",
        text: &request.query,
    };
    let ranked = rank_passages(
        &engine.ranker,
        engine.provider.as_ref(),
        query,
        &items,
        &engine.iter,
        request.mode,
    )?;
    let mut results: Vec<RerankResult> = (0..n)
        .map(|i| RerankResult {
            index: i,
            id: ids[i].clone(),
            score: ranked.scores[i],
            rank: ranked.ranks[i],
        })
        .collect();
    results.sort_by_key(|r| r.rank);
    results.truncate(request.top_k.unwrap_or(n));
    Ok(RerankResponse {
        results,
        rounds: ranked.rounds,
        model_id: engine.model_id.clone(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn rerank_route(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Json<RerankResponse>, ServiceError> {
    let request: RerankRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::new(400, format!("invalid request: {e}")))?;
    let response = tokio::task::spawn_blocking(move || handle_rerank(&request, &engine))
        .await
        .map_err(|e| ServiceError::new(500, e.to_string()))??;
    Ok(Json(response))
}

async fn health_route(State(engine): State<Arc<Engine>>) -> Json<HealthResponse> {
    Json(engine.health())
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/rerank", post(rerank_route))
        .route("/health", get(health_route))
        .layer(DefaultBodyLimit::max(BODY_LIMIT_BYTES))
        .with_state(engine)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::expected_rounds;
    use crate::model::ModelConfig;

    fn engine() -> Engine {
        let cfg = ModelConfig {
            seed: 3,
            ..ModelConfig::new(16)
        };
        Engine::new(Ranker::init(&cfg).unwrap(), IterConfig::default()).unwrap()
    }

    fn request(passages: Vec<&str>) -> RerankRequest {
        RerankRequest {
            query: "soft wool socks".into(),
            passages: passages.into_iter().map(|p| PassageInput::Text(p.into())).collect(),
            top_k: None,
            mode: RankMode::Iterative,
        }
    }

    #[test]
    fn duplicates_tie_by_index() {
        let e = engine();
        let r = handle_rerank(&request(vec!["warm socks", "a kettle", "warm socks"]), &e).unwrap();
        let a = r.results.iter().find(|x| x.index == 0).unwrap();
        let b = r.results.iter().find(|x| x.index == 2).unwrap();
        assert_eq!(a.score, b.score);
        assert!(a.rank < b.rank);
        let ranks: Vec<usize> = r.results.iter().map(|x| x.rank).collect();
        assert_eq!(ranks, vec![1, 2, 3]);
    }

    #[test]
    fn direct_matches_iterative_for_short_lists() {
        let e = engine();
        let mut req = request(vec!["one", "two", "three", "four"]);
        let a = handle_rerank(&req, &e).unwrap();
        req.mode = RankMode::Direct;
        let b = handle_rerank(&req, &e).unwrap();
        assert_eq!(a.results, b.results);
    }

    #[test]
    fn rejects_bad_requests() {
        let mut e = engine();
        assert_eq!(handle_rerank(&request(vec![]), &e).unwrap_err().status, 400);
        let mut req = request(vec!["a", "b"]);
        req.top_k = Some(3);
        assert_eq!(handle_rerank(&req, &e).unwrap_err().status, 400);
        e.max_passages = 1;
        assert_eq!(handle_rerank(&request(vec!["a", "b"]), &e).unwrap_err().status, 413);
    }

    #[test]
    fn top_k_and_rounds() {
        let e = engine();
        let texts: Vec<String> = (0..200).map(|i| format!("passage number {i}")).collect();
        let mut req = request(texts.iter().map(String::as_str).collect());
        req.top_k = Some(5);
        let r = handle_rerank(&req, &e).unwrap();
        assert_eq!(r.results.len(), 5);
        assert_eq!(r.rounds, expected_rounds(200, &IterConfig::default()));
        assert_eq!(r.rounds, 11);
    }

    #[test]
    fn passage_objects_keep_ids() {
        let json = r#"{"query":"q","passages":["plain",{"id":"x7","text":"object"}],"mode":"direct"}"#;
        let req: RerankRequest = serde_json::from_str(json).unwrap();
        let r = handle_rerank(&req, &engine()).unwrap();
        let ids: Vec<&str> = {
            let mut v: Vec<_> = r.results.iter().map(|x| x.id.as_str()).collect();
            v.sort();
            v
        };
        assert_eq!(ids, vec!["0", "x7"]);
    }
}
