use std::net::SocketAddr;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::wire::{ErrorResponse, InfoResponse, QueryRequest, QueryResponse};
use super::{Oracle, OracleError, OracleMode, OracleResponse};
use crate::autodiff::Tensor;
use crate::models::image_len;

type Shared = Arc<dyn Oracle>;

/// A running query service. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Serves `oracle` on `bind` (e.g. `127.0.0.1:0`) from a background
/// runtime. Bind failures are reported here, before returning.
pub fn serve(oracle: Arc<dyn Oracle>, bind: &str) -> Result<ServerHandle, OracleError> {
    let (ready_tx, ready_rx) = mpsc::channel();
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let bind = bind.to_string();
    let thread = std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = ready_tx.send(Err(e.to_string()));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(&bind).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = ready_tx.send(Err(format!("cannot bind {bind}: {e}")));
                    return;
                }
            };
            let _ = ready_tx.send(listener.local_addr().map_err(|e| e.to_string()));
            let _ = axum::serve(listener, router(oracle))
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await;
        });
    });
    match ready_rx.recv() {
        Ok(Ok(addr)) => Ok(ServerHandle {
            addr,
            shutdown: Some(stop_tx),
            thread: Some(thread),
        }),
        Ok(Err(message)) => {
            let _ = thread.join();
            Err(OracleError::Internal(message))
        }
        Err(_) => Err(OracleError::Internal("server thread exited during startup".into())),
    }
}

pub(crate) fn router(oracle: Shared) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/info", get(info))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(oracle)
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (status, Json(ErrorResponse::new(code, message))).into_response()
}

async fn info(State(oracle): State<Shared>) -> Json<InfoResponse> {
    Json(InfoResponse {
        classes: oracle.classes(),
        shape: oracle.image_shape(),
        queries_served: oracle.queries(),
    })
}

async fn query(State(oracle): State<Shared>, body: Bytes) -> Response {
    let req: QueryRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()),
    };
    let shape = oracle.image_shape();
    if req.shape != shape {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "shape_mismatch",
            format!("expected shape {shape:?}, got {:?}", req.shape),
        );
    }
    let d = image_len(shape);
    if req.images.is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "empty_batch", "no images in request");
    }
    if let Some(i) = req.images.iter().position(|im| im.len() != d) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "shape_mismatch",
            format!("image {i} has {} values, expected {d}", req.images[i].len()),
        );
    }
    let b = req.images.len();
    let flat = req.images.into_iter().flatten().collect();
    let images = match Tensor::new(&[b, shape[0], shape[1], shape[2]], flat) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", e.to_string()),
    };
    let mode = req.mode;
    let result = tokio::task::spawn_blocking(move || oracle.query(&images, mode)).await;
    match result {
        Ok(Ok(resp)) => Json(match (mode, resp) {
            (OracleMode::Probability, OracleResponse::Probabilities(p)) => QueryResponse::Outputs {
                outputs: (0..p.rows()).map(|r| p.row(r).to_vec()).collect(),
            },
            (_, other) => QueryResponse::Labels { labels: other.labels() },
        })
        .into_response(),
        Ok(Err(OracleError::InvalidInput(m))) => error(StatusCode::UNPROCESSABLE_ENTITY, "invalid_input", m),
        Ok(Err(OracleError::Shape { expected, got })) => error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "shape_mismatch",
            format!("expected [b, {expected:?}], got {got:?}"),
        ),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}
