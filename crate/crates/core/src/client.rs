//! Headless player client speaking the platform's HTTP API. Used by tests,
//! load scripts and the acceptance suite in place of a browser.

use std::collections::VecDeque;
use std::time::Duration;

use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::task::JoinHandle;
use url::Url;
use xtribe_protocol::Message;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Http(#[from] reqwest::Error),
    #[error("{status}: {code}: {message}")]
    Api {
        status: StatusCode,
        code: String,
        message: String,
    },
    #[error("no session open")]
    NoSession,
    #[error("timed out waiting for a message")]
    Timeout,
}

impl ClientError {
    /// The API error code, if the server answered with one.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct SessionResponse {
    token: String,
}

#[derive(Deserialize)]
struct PollResponse {
    messages: Vec<Message>,
    cursor: u64,
}

#[derive(Deserialize)]
struct ApiErrorBody {
    error: String,
    message: String,
}

pub struct HeadlessClient {
    http: reqwest::Client,
    base: Url,
    token: Option<String>,
    cursor: Option<u64>,
    buffered: VecDeque<Message>,
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let (code, message) = match serde_json::from_str::<ApiErrorBody>(&text) {
        Ok(b) => (b.error, b.message),
        Err(_) => ("http".to_owned(), text),
    };
    Err(ClientError::Api { status, code, message })
}

impl HeadlessClient {
    pub fn new(base: Url) -> Self {
        HeadlessClient {
            http: reqwest::Client::new(),
            base,
            token: None,
            cursor: None,
            buffered: VecDeque::new(),
        }
    }

    fn url(&self, path: &str) -> Url {
        self.base.join(path).expect("valid API path")
    }

    fn token(&self) -> Result<&str, ClientError> {
        self.token.as_deref().ok_or(ClientError::NoSession)
    }

    /// The raw session token, as the server issued it.
    pub fn session_token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub async fn register(&self, username: &str, password: &str, profile: Value) -> Result<(), ClientError> {
        let resp = self
            .http
            .post(self.url("/api/register"))
            .json(&json!({"username": username, "password": password, "profile": profile}))
            .send()
            .await?;
        check(resp).await.map(drop)
    }

    pub async fn open_session(&mut self, game_id: &str, credentials: Option<(&str, &str)>) -> Result<(), ClientError> {
        let mut body = json!({"game_id": game_id});
        if let Some((u, p)) = credentials {
            body["username"] = json!(u);
            body["password"] = json!(p);
        }
        let resp = self.http.post(self.url("/api/session")).json(&body).send().await?;
        let s: SessionResponse = check(resp).await?.json().await?;
        self.token = Some(s.token);
        self.cursor = None;
        self.buffered.clear();
        Ok(())
    }

    pub async fn join(&self, game_id: &str) -> Result<Value, ClientError> {
        let resp = self
            .http
            .post(self.url(&format!("/api/game/{game_id}/join")))
            .bearer_auth(self.token()?)
            .send()
            .await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn send(&self, topic: &str, params: Option<Value>) -> Result<(), ClientError> {
        self.send_to("manager", topic, params).await
    }

    pub async fn send_to(&self, recipient: &str, topic: &str, params: Option<Value>) -> Result<(), ClientError> {
        let mut body = json!({"recipient": recipient, "topic": topic});
        if let Some(p) = params {
            body["params"] = p;
        }
        let resp = self
            .http
            .post(self.url("/api/send"))
            .bearer_auth(self.token()?)
            .json(&body)
            .send()
            .await?;
        check(resp).await.map(drop)
    }

    /// Reports that the game UI finished loading.
    pub async fn ready(&self) -> Result<(), ClientError> {
        self.send_to("system", "ready", None).await
    }

    pub async fn heartbeat(&self) -> Result<(), ClientError> {
        let resp = self
            .http
            .post(self.url("/api/heartbeat"))
            .bearer_auth(self.token()?)
            .send()
            .await?;
        check(resp).await.map(drop)
    }

    pub async fn session_info(&self) -> Result<Value, ClientError> {
        let resp = self
            .http
            .get(self.url("/api/session"))
            .bearer_auth(self.token()?)
            .send()
            .await?;
        Ok(check(resp).await?.json().await?)
    }

    /// Sends heartbeats every `every` until the handle is aborted.
    pub fn spawn_heartbeat(&self, every: Duration) -> Result<JoinHandle<()>, ClientError> {
        let http = self.http.clone();
        let url = self.url("/api/heartbeat");
        let token = self.token()?.to_owned();
        Ok(tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                if let Err(e) = http.post(url.clone()).bearer_auth(&token).send().await {
                    tracing::debug!(error = %e, "heartbeat failed");
                }
            }
        }))
    }

    /// One poll round trip. Acknowledges everything seen so far.
    pub async fn poll(&mut self, linger: Duration) -> Result<Vec<Message>, ClientError> {
        let mut req = self
            .http
            .get(self.url("/api/poll"))
            .bearer_auth(self.token()?)
            .query(&[("linger_ms", linger.as_millis() as u64)]);
        if let Some(c) = self.cursor {
            req = req.query(&[("cursor", c)]);
        }
        let batch: PollResponse = check(req.send().await?).await?.json().await?;
        self.cursor = Some(batch.cursor);
        Ok(batch.messages)
    }

    /// Next delivered message, polling as needed.
    pub async fn next_message(&mut self, timeout: Duration) -> Result<Message, ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if let Some(m) = self.buffered.pop_front() {
                return Ok(m);
            }
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            if left.is_zero() {
                return Err(ClientError::Timeout);
            }
            let batch = self.poll(left.min(Duration::from_secs(5))).await?;
            self.buffered.extend(batch);
        }
    }

    /// Skips messages until one with `topic` arrives and returns it. The
    /// skipped messages are returned too, in order.
    pub async fn wait_for(&mut self, topic: &str, timeout: Duration) -> Result<(Message, Vec<Message>), ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        let mut skipped = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            let m = self.next_message(left).await?;
            if m.topic == topic {
                return Ok((m, skipped));
            }
            skipped.push(m);
        }
    }

    /// Everything delivered within `window`, without waiting beyond it.
    pub async fn drain(&mut self, window: Duration) -> Result<Vec<Message>, ClientError> {
        let deadline = tokio::time::Instant::now() + window;
        let mut out: Vec<Message> = self.buffered.drain(..).collect();
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            if left.is_zero() {
                return Ok(out);
            }
            out.extend(self.poll(left).await?);
        }
    }

    pub async fn catalog(&self) -> Result<Value, ClientError> {
        let mut req = self.http.get(self.url("/api/catalog"));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        Ok(check(req.send().await?).await?.json().await?)
    }

    pub async fn leaderboard(&self, game_id: &str) -> Result<Value, ClientError> {
        let resp = self
            .http
            .get(self.url(&format!("/api/leaderboard/{game_id}")))
            .send()
            .await?;
        Ok(check(resp).await?.json().await?)
    }
}
