//! HTTP wrapper shared by every GM: `POST /` with form variable `message`.

use std::sync::Arc;

use axum::extract::{Form, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde::Deserialize;
use tokio::net::TcpListener;
use xtribe_protocol::{decode_message, encode_gm_response};

use crate::GmHandler;

#[derive(Deserialize)]
struct MessageForm {
    message: String,
}

async fn receive<H: GmHandler>(State(handler): State<Arc<H>>, Form(form): Form<MessageForm>) -> Response {
    let message = match decode_message(&form.message) {
        Ok(m) => m,
        Err(e) => {
            tracing::warn!(error = %e, "undecodable message");
            return (StatusCode::BAD_REQUEST, e.to_string()).into_response();
        }
    };
    tracing::debug!(topic = %message.topic, instance = ?message.instance_id, "received");
    let replies = handler.handle(message);
    match encode_gm_response(&replies) {
        Ok(body) => ([(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(v) => {
            tracing::error!(violation = %v, "handler produced an invalid message");
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

pub fn router<H: GmHandler>(handler: Arc<H>) -> Router {
    Router::new().route("/", post(receive::<H>)).with_state(handler)
}

pub async fn serve<H: GmHandler>(
    listener: TcpListener,
    handler: Arc<H>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(handler))
        .with_graceful_shutdown(shutdown)
        .await
}
