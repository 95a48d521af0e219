//! HTTP inference service.
//!
//! `GET /model` describes the loaded checkpoint, `POST /infer` runs one
//! forward pass, `GET /healthz` answers 200. Bodies are JSON; images travel
//! as base64 PNG. The model is loaded once and shared read-only; a semaphore
//! caps the number of forward passes in flight.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tuneconv_core::train::Checkpoint;

use crate::infer::{run_inference, sha256_hex, InferError, DEFAULT_MAX_PIXELS};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_pixels: usize,
    pub workers: usize,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_pixels: DEFAULT_MAX_PIXELS,
            workers: 2,
            max_body_bytes: 64 << 20,
        }
    }
}

struct Shared {
    ckpt: Checkpoint,
    hash: String,
    cfg: ServiceConfig,
    permits: Semaphore,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// `raw` is the checkpoint file as read from disk; its digest identifies
    /// the model in `/model`.
    pub fn from_bytes(raw: &[u8], cfg: ServiceConfig) -> tuneconv_core::Result<Self> {
        let ckpt = Checkpoint::from_bytes(raw)?;
        Ok(Self::new(ckpt, sha256_hex(raw), cfg))
    }

    pub fn new(ckpt: Checkpoint, hash: String, cfg: ServiceConfig) -> Self {
        let permits = Semaphore::new(cfg.workers.max(1));
        AppState(Arc::new(Shared {
            ckpt,
            hash,
            cfg,
            permits,
        }))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InferRequest {
    image: String,
    omega: Vec<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct InferResponse {
    pub image: String,
    pub clamped_omega: Vec<f64>,
    pub latency_ms: f64,
}

fn reject(status: StatusCode, code: &str, reason: impl Into<String>) -> Response {
    (status, Json(json!({ "error": code, "reason": reason.into() }))).into_response()
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.cfg.max_body_bytes;
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/model", get(model))
        .route("/infer", post(infer))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn model(State(s): State<AppState>) -> Response {
    let s = &s.0;
    let h = s.ckpt.header();
    Json(json!({
        "p": h.p,
        "objective_ids": h.objective_ids,
        "objective_labels": h.objective_ids.iter().map(|o| o.label()).collect::<Vec<_>>(),
        "lambda": h.lambda,
        "topology": h.topology,
        "iteration": h.iteration,
        "constraints": {
            "omega_length": h.p,
            "omega_min": 0.0,
            "omega_max": 1.0,
            "omega_out_of_range": "clamped",
            "image_format": "png",
            "channels": 3,
            "max_pixels": s.cfg.max_pixels,
        },
        "checkpoint_sha256": s.hash,
    }))
    .into_response()
}

async fn infer(State(s): State<AppState>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: InferRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()),
    };
    let png = match B64.decode(req.image.as_bytes()) {
        Ok(b) => b,
        Err(e) => return reject(StatusCode::BAD_REQUEST, "bad_base64", e.to_string()),
    };
    let Ok(_permit) = s.0.permits.acquire().await else {
        return reject(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", "service is stopping");
    };
    let shared = s.0.clone();
    let omega = req.omega;
    let out = tokio::task::spawn_blocking(move || run_inference(&shared.ckpt, &png, &omega, shared.cfg.max_pixels)).await;
    let out = match out {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    };
    match out {
        Ok(o) => {
            if o.clamped {
                log::warn!("omega clamped to {:?}", o.omega);
            }
            Json(InferResponse {
                image: B64.encode(&o.png),
                clamped_omega: o.omega,
                latency_ms: start.elapsed().as_secs_f64() * 1e3,
            })
            .into_response()
        }
        Err(e @ InferError::OmegaLength { .. }) => reject(StatusCode::UNPROCESSABLE_ENTITY, "omega_length", e.to_string()),
        Err(e @ InferError::TooLarge { .. }) => reject(StatusCode::PAYLOAD_TOO_LARGE, "image_too_large", e.to_string()),
        Err(e @ InferError::BadImage(_)) => reject(StatusCode::BAD_REQUEST, "bad_image", e.to_string()),
        Err(e @ InferError::Runtime(_)) => reject(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", e.to_string()),
    }
}

/// Binds `addr` and returns the bound address with the serving future.
pub async fn bind(
    state: AppState,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state);
    Ok((local, async move { axum::serve(listener, app).await }))
}
