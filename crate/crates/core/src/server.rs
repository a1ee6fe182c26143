//! HTTP surface of the platform.
//!
//! Player endpoints live under `/api` and authenticate with
//! `Authorization: Bearer <session token>`. GMs push unprompted messages to
//! `/gm/push` with their game token in `X-GM-Token`. Hosted UI bundles are
//! served from `/games/{id}/...` and `/assets/{hash}`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Form, FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use xtribe_protocol::{Endpoint, Message, FORM_VARIABLE};

use crate::games::GameError;
use crate::ids::{GameId, SessionToken};
use crate::platform::{Platform, PlatformError};
use crate::users::{DenyReason, ProfileInput, RegistryError};

pub const GM_TOKEN_HEADER: &str = "x-gm-token";

type Shared = State<Arc<Platform>>;

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/api/register", post(register))
        .route("/api/session", post(open_session).get(session_info))
        .route("/api/game/{game_id}/join", post(join))
        .route("/api/send", post(send))
        .route("/api/poll", get(poll))
        .route("/api/heartbeat", post(heartbeat))
        .route("/api/catalog", get(catalog))
        .route("/api/leaderboard/{game_id}", get(leaderboard))
        .route("/gm/push", post(gm_push))
        .route("/games/{game_id}/{*path}", get(game_asset))
        .route("/assets/{hash}", get(blob))
        .with_state(platform)
}

/// Serves until `shutdown` resolves, running the reaper alongside. On
/// shutdown, live instances are aborted before the listener closes.
pub async fn serve_on(
    listener: TcpListener,
    platform: Arc<Platform>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let reaper = tokio::spawn(reap_forever(platform.clone()));
    let for_shutdown = platform.clone();
    let result = axum::serve(listener, router(platform))
        .with_graceful_shutdown(async move {
            shutdown.await;
            for_shutdown.shutdown().await;
        })
        .await;
    reaper.abort();
    result
}

async fn reap_forever(platform: Arc<Platform>) {
    let mut tick = tokio::time::interval(platform.config().reap_interval());
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        platform.expire(Instant::now()).await;
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        use PlatformError as P;
        let msg = e.to_string();
        match e {
            P::UnknownGame(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown_game", msg),
            P::BadCredentials => ApiError::new(StatusCode::UNAUTHORIZED, "bad_credentials", msg),
            P::AccessDenied(reason) => ApiError::new(
                StatusCode::FORBIDDEN,
                "access_denied",
                match reason {
                    DenyReason::RegistrationRequired => "registration required",
                    DenyReason::ProfileMismatch | DenyReason::NotAvailable => "this game is not available to you",
                },
            ),
            P::InvalidSession => ApiError::new(StatusCode::UNAUTHORIZED, "invalid_session", msg),
            P::WrongGame => ApiError::new(StatusCode::CONFLICT, "wrong_game", msg),
            P::AlreadyQueued => ApiError::new(StatusCode::CONFLICT, "already_queued", msg),
            P::AlreadyPlaying => ApiError::new(StatusCode::CONFLICT, "already_playing", msg),
            P::NoInstance => ApiError::new(StatusCode::CONFLICT, "no_instance", msg),
            P::InstanceClosed(state) => ApiError::new(StatusCode::CONFLICT, "instance_closed", state.as_str()),
            P::BadRequest(m) => ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m),
            P::Unauthorized => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", msg),
            P::Gm(e) => ApiError::new(StatusCode::BAD_GATEWAY, e.class(), "the game manager failed"),
            P::Registry(e) => registry_error(e),
            P::Game(GameError::Unknown(_)) => ApiError::new(StatusCode::NOT_FOUND, "unknown_game", msg),
            P::Game(e) => {
                tracing::error!(error = %e, "game registry error");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
            }
            P::ShuttingDown => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", msg),
        }
    }
}

fn registry_error(e: RegistryError) -> ApiError {
    let msg = e.to_string();
    match e {
        RegistryError::DuplicateUsername(_) => ApiError::new(StatusCode::CONFLICT, "duplicate_username", msg),
        RegistryError::InvalidUsername | RegistryError::WeakPassword | RegistryError::InvalidProfile { .. } => {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_registration", msg)
        }
        RegistryError::BadCredentials => ApiError::new(StatusCode::UNAUTHORIZED, "bad_credentials", msg),
        other => {
            tracing::error!(error = %other, "user registry error");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
        }
    }
}

/// Bearer session token.
pub struct Bearer(pub SessionToken);

impl<S: Send + Sync> FromRequestParts<S> for Bearer {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        bearer(&parts.headers)
            .map(Bearer)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "invalid_session", "missing bearer token"))
    }
}

fn bearer(headers: &HeaderMap) -> Option<SessionToken> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let token = value.strip_prefix("Bearer ")?.trim();
    (!token.is_empty()).then(|| SessionToken::from_header(token))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterRequest {
    username: String,
    password: String,
    #[serde(default)]
    profile: ProfileInput,
}

async fn register(State(p): Shared, Json(req): Json<RegisterRequest>) -> Result<impl IntoResponse, ApiError> {
    p.register_user(req.username.clone(), req.password, req.profile).await?;
    Ok((StatusCode::CREATED, Json(json!({"username": req.username}))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    game_id: GameId,
    username: Option<String>,
    password: Option<String>,
}

#[derive(Serialize)]
struct SessionResponse {
    token: String,
    game_id: GameId,
    heartbeat_ms: u64,
}

async fn open_session(State(p): Shared, Json(req): Json<SessionRequest>) -> Result<Json<SessionResponse>, ApiError> {
    let credentials = match (req.username, req.password) {
        (Some(u), Some(pw)) => Some((u, pw)),
        (None, None) => None,
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "give both username and password, or neither")),
    };
    let token = p.open_session(credentials, &req.game_id).await?;
    Ok(Json(SessionResponse {
        token: token.expose().to_owned(),
        game_id: req.game_id,
        heartbeat_ms: (p.config().liveness_window / 4).as_millis() as u64,
    }))
}

async fn session_info(State(p): Shared, Bearer(token): Bearer) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(p.session_info(&token)?))
}

async fn join(State(p): Shared, Bearer(token): Bearer, Path(game_id): Path<GameId>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(p.join(&token, &game_id).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SendRequest {
    #[serde(default = "default_recipient")]
    recipient: String,
    topic: String,
    #[serde(default)]
    params: Option<Value>,
}

fn default_recipient() -> String {
    Endpoint::Manager.as_str().to_owned()
}

async fn send(State(p): Shared, Bearer(token): Bearer, Json(req): Json<SendRequest>) -> Result<impl IntoResponse, ApiError> {
    let recipient: Endpoint = req
        .recipient
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "unknown recipient"))?;
    p.client_send(&token, recipient, &req.topic, req.params).await?;
    Ok(Json(json!({"ok": true})))
}

#[derive(Deserialize)]
struct PollQuery {
    cursor: Option<u64>,
    linger_ms: Option<u64>,
}

#[derive(Serialize)]
struct PollResponse {
    messages: Vec<Message>,
    cursor: u64,
}

async fn poll(State(p): Shared, Bearer(token): Bearer, Query(q): Query<PollQuery>) -> Result<Json<PollResponse>, ApiError> {
    let (messages, cursor) = p.poll(&token, q.cursor, q.linger_ms.map(Duration::from_millis)).await?;
    Ok(Json(PollResponse { messages, cursor }))
}

async fn heartbeat(State(p): Shared, Bearer(token): Bearer) -> Result<StatusCode, ApiError> {
    p.heartbeat(&token)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn catalog(State(p): Shared, headers: HeaderMap) -> impl IntoResponse {
    Json(p.catalog(bearer(&headers).as_ref()))
}

#[derive(Deserialize)]
struct TopQuery {
    top: Option<usize>,
}

async fn leaderboard(State(p): Shared, Path(game_id): Path<GameId>, Query(q): Query<TopQuery>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(p.leaderboard(&game_id, q.top.unwrap_or(10).min(1000))?))
}

#[derive(Deserialize)]
struct PushForm {
    message: String,
}

async fn gm_push(State(p): Shared, headers: HeaderMap, Form(form): Form<PushForm>) -> Result<impl IntoResponse, ApiError> {
    debug_assert_eq!(FORM_VARIABLE, "message");
    let token = headers
        .get(GM_TOKEN_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default();
    let accepted = p.gm_push(token, &form.message).await?;
    Ok(Json(json!({"accepted": accepted})))
}

async fn game_asset(State(p): Shared, Path((game_id, path)): Path<(GameId, String)>) -> Response {
    match p.games().get(&game_id) {
        Some(g) if g.status != crate::games::GameStatus::Suspended => {}
        _ => return StatusCode::NOT_FOUND.into_response(),
    }
    match p.games().asset(&game_id, &path) {
        Some(asset) => (
            [
                (header::CONTENT_TYPE, HeaderValue::from_static(asset.content_type)),
                (header::CACHE_CONTROL, HeaderValue::from_static("no-cache")),
            ],
            asset.bytes.as_ref().clone(),
        )
            .into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn blob(State(p): Shared, Path(hash): Path<String>) -> Response {
    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return StatusCode::NOT_FOUND.into_response();
    }
    match p.games().blob(&hash) {
        Some(bytes) => (
            [(header::CACHE_CONTROL, "public, max-age=31536000, immutable")],
            bytes.as_ref().clone(),
        )
            .into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}
