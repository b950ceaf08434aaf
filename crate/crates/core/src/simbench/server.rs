use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::Router;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use super::world::SimWorld;
use crate::backends::transport::{InProcessTransport, RawResponse};
use crate::backends::wire::{self, ErrorBody, WireError, ANSWER_PATH, GENERATE_PATH};

fn error(status: u16, message: impl Into<String>) -> RawResponse {
    RawResponse {
        status,
        body: wire::encode(&ErrorBody {
            error: message.into(),
        })
        .expect("error body encodes"),
    }
}

fn ok<T: serde::Serialize>(value: &T) -> RawResponse {
    match wire::encode(value) {
        Ok(body) => RawResponse { status: 200, body },
        Err(e) => error(500, e.to_string()),
    }
}

fn bad_request(e: WireError) -> RawResponse {
    error(400, e.to_string())
}

/// Serves one wire-protocol request against `world`. Pure function of its
/// inputs, so it backs both the HTTP server and in-process tests.
pub fn handle_request(world: &SimWorld, path: &str, body: &[u8]) -> RawResponse {
    match path {
        ANSWER_PATH => {
            let req = match wire::decode_answer_request(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e),
            };
            match world.sim_answer(&req.image_uri, &req.question, &req.candidates) {
                Ok(scores) => ok(&wire::AnswerResponse { scores }),
                Err(e) => error(400, e.to_string()),
            }
        }
        GENERATE_PATH => {
            let req = match wire::decode_generate_request(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e),
            };
            match world.sim_rephrase(&req.image_uri, &req.answer, req.num_samples, req.top_p, req.seed) {
                Ok(questions) => ok(&wire::GenerateResponse { questions }),
                Err(e) => error(400, e.to_string()),
            }
        }
        other => error(404, format!("no route for {other}")),
    }
}

pub fn in_process_transport(world: Arc<SimWorld>) -> InProcessTransport {
    InProcessTransport::new(move |path, body| handle_request(&world, path, body))
}

async fn route(
    State(world): State<Arc<SimWorld>>,
    Path(endpoint): Path<String>,
    body: Bytes,
) -> impl IntoResponse {
    let resp = handle_request(&world, &format!("/v1/{endpoint}"), &body);
    (
        StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        [(header::CONTENT_TYPE, "application/json")],
        resp.body,
    )
}

fn router(world: Arc<SimWorld>) -> Router {
    Router::new()
        .route("/v1/{endpoint}", post(route))
        .with_state(world)
}

/// Serves `world` on an already-bound listener until the task is dropped.
pub async fn serve(world: Arc<SimWorld>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(world)).await
}

/// Binds `addr` and serves in a background task. Returns the bound address,
/// which matters when `addr` asks for port 0.
pub async fn spawn_server(
    world: Arc<SimWorld>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(world, listener))))
}
