//! `POST /predict` and `GET /health` over one immutable model.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use icdlaat_core::trainer::{load_model, Model};
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, Result};
use crate::manifest::{sibling, RunRecorder};

pub const DEFAULT_BODY_LIMIT: usize = 1 << 20;

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Request bodies above this many bytes are rejected with 413.
    #[arg(long, default_value_t = DEFAULT_BODY_LIMIT)]
    pub max_body: usize,
    #[arg(long)]
    pub run_manifest: Option<PathBuf>,
}

pub struct ServiceState {
    pub model: Model,
    pub threshold: f64,
    /// Checksum of the loaded model file.
    pub version: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub documents: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CodeScore {
    pub code: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictResponse {
    pub codes: Vec<CodeScore>,
    pub model_version: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub fingerprint: String,
    pub labels: usize,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

async fn predict(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || worker.model.predict(&req.documents, worker.threshold, 0)).await;
    match result {
        Ok(Ok(p)) => Json(PredictResponse {
            codes: p.codes.into_iter().map(|c| CodeScore { code: c.code, score: c.score }).collect(),
            model_version: state.version.clone(),
        })
        .into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), fingerprint: state.version.clone(), labels: state.model.labels.len() })
}

pub fn router(state: Arc<ServiceState>, max_body: usize) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(state)
}

pub fn state_for(model: Model, threshold: Option<f64>) -> Result<ServiceState> {
    let threshold = threshold.unwrap_or(model.config.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let version = model.checksum().map(str::to_string).ok_or_else(|| usage("model was not loaded from a file"))?;
    Ok(ServiceState { model, threshold, version })
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let mut rec = RunRecorder::start("serve");
    let model = load_model(&args.model).map_err(|e| CliError::Runtime(anyhow::Error::new(e).context(format!("loading model {}", args.model.display()))))?;
    rec.input(&args.model)?;
    rec.digests(&model.vocab.to_manifest(), &model.labels.to_manifest());
    let state = Arc::new(state_for(model, args.threshold)?);
    rec.config(serde_json::json!({ "bind": args.bind.to_string(), "threshold": state.threshold, "max_body": args.max_body }))
        .metrics(serde_json::json!({ "fingerprint": state.version }));
    rec.finish(&args.run_manifest.clone().unwrap_or_else(|| sibling(&args.model, "serve.run.json")))?;

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .with_context(|| format!("cannot bind {}", args.bind))?;
        eprintln!("serving {} on http://{}", args.model.display(), listener.local_addr()?);
        axum::serve(listener, router(state, args.max_body))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        assert!(serde_json::from_str::<PredictRequest>(r#"{"documents":["a b"]}"#).is_ok());
        assert!(serde_json::from_str::<PredictRequest>("{}").is_err());
        assert!(serde_json::from_str::<PredictRequest>(r#"{"documents":"a"}"#).is_err());
        assert!(serde_json::from_str::<PredictRequest>(r#"{"documents":[],"x":1}"#).is_err());
    }
}
