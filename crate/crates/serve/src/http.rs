use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prodcat::catalog::Product;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::batcher::{Batcher, EnqueueError};

/// Everything the handlers share.
pub struct AppState {
    pub batcher: Batcher,
    pub model_hash: String,
    pub config_hash: String,
}

/// A validated `/v1/predict` body.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub request_id: String,
    pub k: Option<usize>,
    pub product: Product,
}

impl PredictRequest {
    /// Checks the body against the request schema, naming every bad field.
    pub fn from_json(body: &Value) -> Result<Self, Vec<String>> {
        let mut bad = Vec::new();
        let Some(obj) = body.as_object() else {
            return Err(vec!["body".into()]);
        };
        for key in obj.keys() {
            if !matches!(key.as_str(), "request_id" | "k" | "unstructured" | "structured") {
                bad.push(key.clone());
            }
        }
        let request_id = match obj.get("request_id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            _ => {
                bad.push("request_id".into());
                String::new()
            }
        };
        let k = match obj.get("k") {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(k) if k >= 1 => Some(k as usize),
                _ => {
                    bad.push("k".into());
                    None
                }
            },
        };
        let mut unstructured = BTreeMap::new();
        match obj.get("unstructured") {
            None | Some(Value::Null) => {}
            Some(Value::Object(m)) => {
                for (name, v) in m {
                    match v.as_str() {
                        Some(text) if !name.is_empty() => {
                            unstructured.insert(name.clone(), text.to_string());
                        }
                        _ => bad.push(format!("unstructured.{name}")),
                    }
                }
            }
            Some(_) => bad.push("unstructured".into()),
        }
        let mut structured = Vec::new();
        match obj.get("structured") {
            None | Some(Value::Null) => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    match item.as_array().map(Vec::as_slice) {
                        Some([Value::String(n), Value::String(v)]) if !n.is_empty() => {
                            structured.push((n.clone(), v.clone()));
                        }
                        _ => bad.push(format!("structured[{i}]")),
                    }
                }
            }
            Some(_) => bad.push("structured".into()),
        }
        if !bad.is_empty() {
            return Err(bad);
        }
        Ok(PredictRequest {
            product: Product {
                id: request_id.clone(),
                unstructured,
                structured,
            },
            request_id,
            k,
        })
    }
}

#[derive(Serialize)]
struct Ranked {
    label: String,
    probability: f64,
}

fn error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

async fn predict(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, json!({"error": format!("invalid JSON: {e}")})),
    };
    let req = match PredictRequest::from_json(&value) {
        Ok(r) => r,
        Err(fields) => {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "validation failed", "fields": fields}),
            )
        }
    };
    let ticket = match app.batcher.enqueue(req.request_id.clone(), req.product, req.k) {
        Ok(t) => t,
        Err(e @ EnqueueError::Overloaded { retry_after }) => {
            let secs = retry_after.as_secs_f64().ceil().max(1.0) as u64;
            return (
                StatusCode::SERVICE_UNAVAILABLE,
                [(header::RETRY_AFTER, secs.to_string())],
                Json(json!({"error": e.to_string()})),
            )
                .into_response();
        }
        Err(e @ EnqueueError::Duplicate(_)) => return error(StatusCode::CONFLICT, json!({"error": e.to_string()})),
        Err(e @ EnqueueError::InvalidK { .. }) => {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": e.to_string(), "fields": ["k"]}),
            )
        }
        Err(e @ EnqueueError::ShuttingDown) => {
            return error(StatusCode::SERVICE_UNAVAILABLE, json!({"error": e.to_string()}))
        }
    };
    let timeout = app.batcher.config().request_timeout;
    match tokio::time::timeout(timeout, ticket).await {
        Ok(Ok(Ok(preds))) => {
            let predictions: Vec<Ranked> = preds
                .into_iter()
                .map(|p| Ranked {
                    label: p.label,
                    probability: p.probability,
                })
                .collect();
            Json(json!({"request_id": req.request_id, "predictions": predictions})).into_response()
        }
        Ok(Ok(Err(e))) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({"error": e.message, "batch_id": e.batch_id}),
        ),
        Ok(Err(_)) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({"error": "request dropped without an answer"}),
        ),
        Err(_) => error(
            StatusCode::GATEWAY_TIMEOUT,
            json!({"error": format!("no answer within {timeout:?}")}),
        ),
    }
}

async fn health(State(app): State<Arc<AppState>>) -> Response {
    let b = &app.batcher;
    let cfg = b.config();
    Json(json!({
        "status": "ok",
        "queue_depth": b.queue_depth(),
        "model_hash": app.model_hash,
        "config_hash": app.config_hash,
        "poll_interval_seconds": cfg.poll_interval.as_secs_f64(),
        "max_batch": cfg.max_batch,
        "stats": b.stats().snapshot(),
    }))
    .into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
