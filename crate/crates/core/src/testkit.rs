//! Helpers for end-to-end tests: an in-process platform on an ephemeral
//! port and closure-backed GMs that record what they receive.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Form, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::post;
use axum::Router;
use serde::Deserialize;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use url::Url;
use xtribe_protocol::{decode_message, encode_gm_response, Message};

use crate::client::HeadlessClient;
use crate::config::PlatformConfig;
use crate::games::{GameDescriptor, GameManifest, GameRegistry};
use crate::platform::Platform;
use crate::server::serve_on;
use crate::users::UserRegistry;

/// One request as seen by a test GM.
#[derive(Debug, Clone)]
pub struct Received {
    pub message: Message,
    pub started: Instant,
    pub finished: Instant,
}

type Handler = dyn Fn(Message) -> Vec<Message> + Send + Sync;

#[derive(Clone)]
struct GmState {
    handler: Arc<Handler>,
    log: Arc<Mutex<Vec<Received>>>,
}

#[derive(Deserialize)]
struct MessageForm {
    message: String,
}

async fn gm_endpoint(State(gm): State<GmState>, Form(form): Form<MessageForm>) -> impl IntoResponse {
    let started = Instant::now();
    let message = decode_message(&form.message).expect("platform sends valid messages");
    let replies = (gm.handler)(message.clone());
    gm.log.lock().unwrap().push(Received {
        message,
        started,
        finished: Instant::now(),
    });
    (
        [(header::CONTENT_TYPE, "application/json")],
        encode_gm_response(&replies).expect("test GM replies are valid"),
    )
}

pub struct TestGm {
    pub url: Url,
    log: Arc<Mutex<Vec<Received>>>,
    task: JoinHandle<()>,
}

impl TestGm {
    pub async fn spawn(handler: impl Fn(Message) -> Vec<Message> + Send + Sync + 'static) -> Self {
        let log = Arc::new(Mutex::new(Vec::new()));
        let state = GmState {
            handler: Arc::new(handler),
            log: log.clone(),
        };
        let app = Router::new().route("/", post(gm_endpoint)).with_state(state);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
        let addr = listener.local_addr().expect("addr");
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.expect("test GM serves");
        });
        TestGm {
            url: Url::parse(&format!("http://{addr}/")).expect("url"),
            log,
            task,
        }
    }

    pub fn received(&self) -> Vec<Received> {
        self.log.lock().unwrap().clone()
    }

    pub fn messages(&self) -> Vec<Message> {
        self.received().into_iter().map(|r| r.message).collect()
    }
}

impl Drop for TestGm {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub struct TestPlatform {
    pub platform: Arc<Platform>,
    pub addr: SocketAddr,
    pub base: Url,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<std::io::Result<()>>>,
}

impl TestPlatform {
    /// Starts an in-memory platform on an ephemeral port.
    pub async fn start(config: PlatformConfig) -> Self {
        let platform = Platform::new(config, Arc::new(UserRegistry::in_memory()), Arc::new(GameRegistry::in_memory()));
        Self::start_with(platform).await
    }

    pub async fn start_with(platform: Arc<Platform>) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
        let addr = listener.local_addr().expect("addr");
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(serve_on(listener, platform.clone(), async move {
            let _ = stopped.await;
        }));
        TestPlatform {
            platform,
            addr,
            base: Url::parse(&format!("http://{addr}/")).expect("url"),
            stop: Some(stop),
            task: Some(task),
        }
    }

    /// Registers and publishes a game whose manifest is given as TOML text
    /// (`gm_url` excluded); the UI bundle is a single `index.html`.
    pub async fn add_game(&self, manifest_body: &str, gm_url: &Url) -> GameDescriptor {
        let text = format!("gm_url = \"{gm_url}\"\n{manifest_body}");
        let manifest = GameManifest::parse(&text).expect("test manifest parses");
        self.platform
            .games()
            .register_game(&manifest, vec![("index.html".into(), b"<!doctype html><title>game</title>".to_vec())])
            .expect("registers");
        self.platform
            .publish_game(&crate::ids::GameId::new(manifest.id))
            .await
            .expect("publishes")
    }

    pub fn client(&self) -> HeadlessClient {
        HeadlessClient::new(self.base.clone())
    }

    /// Graceful stop: live instances are aborted first.
    pub async fn stop(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for TestPlatform {
    fn drop(&mut self) {
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}
