//! Outbound delivery to researcher-hosted Game Managers and routing of
//! whatever they answer.
//!
//! A GM is a plain HTTP endpoint. Each message is POSTed form-encoded as the
//! single variable `message`; the response body holds zero or more messages.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::Value;
use url::Url;
use xtribe_protocol::{decode_gm_response, encode_message, Endpoint, Message, SystemTopic, FORM_VARIABLE};

use crate::ids::{ClientId, InstanceId};
use crate::instance::GameInstance;

pub const DEFAULT_MAX_RESPONSE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct GmEndpoint {
    pub url: Url,
    pub timeout: Duration,
    pub max_response_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid GM URL `{url}`: {reason}")]
pub struct InvalidGmUrl {
    pub url: String,
    pub reason: String,
}

pub fn parse_gm_url(raw: &str) -> Result<Url, InvalidGmUrl> {
    let bad = |reason: &str| InvalidGmUrl {
        url: raw.to_owned(),
        reason: reason.to_owned(),
    };
    let url = Url::parse(raw.trim()).map_err(|e| bad(&e.to_string()))?;
    if !matches!(url.scheme(), "http" | "https") {
        return Err(bad("scheme must be http or https"));
    }
    if url.host_str().is_none_or(str::is_empty) {
        return Err(bad("missing host"));
    }
    Ok(url)
}

impl GmEndpoint {
    pub fn new(url: &str, timeout: Duration, max_response_bytes: usize) -> Result<Self, InvalidGmUrl> {
        Ok(GmEndpoint {
            url: parse_gm_url(url)?,
            timeout,
            max_response_bytes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GmError {
    #[error("game manager unreachable: {reason}")]
    Unreachable {
        instance: Option<InstanceId>,
        reason: String,
    },
    #[error("game manager protocol fault: {reason}")]
    ProtocolFault {
        instance: Option<InstanceId>,
        reason: String,
    },
}

impl GmError {
    pub fn instance(&self) -> Option<&InstanceId> {
        match self {
            GmError::Unreachable { instance, .. } | GmError::ProtocolFault { instance, .. } => instance.as_ref(),
        }
    }

    /// Short machine-readable class used in error messages sent to players.
    pub fn class(&self) -> &'static str {
        match self {
            GmError::Unreachable { .. } => "gm_unreachable",
            GmError::ProtocolFault { .. } => "gm_protocol_fault",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmClient {
    http: reqwest::Client,
}

impl Default for GmClient {
    fn default() -> Self {
        Self::new()
    }
}

impl GmClient {
    pub fn new() -> Self {
        let http = reqwest::Client::builder()
            .user_agent(concat!("xtribe/", env!("CARGO_PKG_VERSION")))
            .pool_idle_timeout(Duration::from_secs(30))
            .build()
            .expect("HTTP client builds");
        GmClient { http }
    }

    /// POSTs one message and returns the GM's reply messages in order.
    pub async fn dispatch(&self, endpoint: &GmEndpoint, message: &Message) -> Result<Vec<Message>, GmError> {
        let instance = message.instance_id.clone();
        let unreachable = |reason: String| GmError::Unreachable {
            instance: instance.clone(),
            reason,
        };
        let fault = |reason: String| GmError::ProtocolFault {
            instance: instance.clone(),
            reason,
        };
        let text = encode_message(message).map_err(|v| fault(format!("refusing to send invalid message: {v}")))?;

        let exchange = async {
            let mut resp = self
                .http
                .post(endpoint.url.clone())
                .form(&[(FORM_VARIABLE, text.as_str())])
                .send()
                .await
                .map_err(|e| unreachable(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(unreachable(format!("HTTP status {}", resp.status())));
            }
            if resp
                .content_length()
                .is_some_and(|n| n > endpoint.max_response_bytes as u64)
            {
                return Err(fault(format!(
                    "response exceeds {} bytes",
                    endpoint.max_response_bytes
                )));
            }
            let mut body = Vec::new();
            while let Some(chunk) = resp.chunk().await.map_err(|e| unreachable(e.to_string()))? {
                if body.len() + chunk.len() > endpoint.max_response_bytes {
                    return Err(fault(format!(
                        "response exceeds {} bytes",
                        endpoint.max_response_bytes
                    )));
                }
                body.extend_from_slice(&chunk);
            }
            Ok(body)
        };
        let body = tokio::time::timeout(endpoint.timeout, exchange)
            .await
            .map_err(|_| unreachable(format!("no response within {:?}", endpoint.timeout)))??;

        let body = std::str::from_utf8(&body).map_err(|_| fault("response is not UTF-8".into()))?;
        decode_gm_response(body).map_err(|e| fault(e.to_string()))
    }

    /// Health check used before publishing a game. Unlike live dispatch this
    /// may retry, since a ping has no game effect.
    pub async fn probe(&self, endpoint: &GmEndpoint, attempts: u32) -> Result<(), GmError> {
        let ping = Message::system(SystemTopic::Ping);
        let mut last = None;
        for attempt in 0..attempts.max(1) {
            if attempt > 0 {
                tokio::time::sleep(Duration::from_millis(200 * u64::from(attempt))).await;
            }
            match self.dispatch(endpoint, &ping).await {
                Ok(_) => return Ok(()),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// What to do with one message from a GM reply.
#[derive(Debug, Clone, PartialEq)]
pub enum Route<K> {
    Deliver { to: K, message: Message },
    Close { scores: Option<BTreeMap<ClientId, f64>> },
    Discard { message: Message, reason: &'static str },
}

/// Plans delivery of a GM batch for `instance`. A batch naming any other
/// instance is rejected whole; individually unroutable messages are discarded
/// while their siblings still go through.
pub fn plan_routes<K: Clone + PartialEq>(
    instance: &GameInstance<K>,
    messages: Vec<Message>,
) -> Result<Vec<Route<K>>, GmError> {
    if let Some(bad) = messages
        .iter()
        .find(|m| m.instance_id.as_ref() != Some(instance.id()))
    {
        return Err(GmError::ProtocolFault {
            instance: Some(instance.id().clone()),
            reason: match &bad.instance_id {
                Some(other) => format!("message for foreign instance {other}"),
                None => "message without instanceId".into(),
            },
        });
    }

    let mut routes = Vec::with_capacity(messages.len());
    for mut m in messages {
        match m.recipient {
            Some(Endpoint::Client) => {
                m.sender = Some(Endpoint::Manager);
                if m.broadcast {
                    for member in instance.members() {
                        routes.push(Route::Deliver {
                            to: member.key.clone(),
                            message: m.clone(),
                        });
                    }
                } else {
                    let target = m.client_id.as_ref().and_then(|c| instance.member_key(c)).cloned();
                    match target {
                        Some(to) => routes.push(Route::Deliver { to, message: m }),
                        None => routes.push(Route::Discard {
                            message: m,
                            reason: "unknown clientId",
                        }),
                    }
                }
            }
            Some(Endpoint::System) if m.system_topic() == Some(SystemTopic::Over) => {
                routes.push(Route::Close {
                    scores: parse_scores(m.params.as_ref()),
                });
            }
            Some(Endpoint::System) => routes.push(Route::Discard {
                message: m,
                reason: "system message from GM not actionable",
            }),
            _ => routes.push(Route::Discard {
                message: m,
                reason: "unroutable recipient",
            }),
        }
    }
    Ok(routes)
}

/// Reads the optional `{clientId: score}` map carried by an `over` message.
pub fn parse_scores(params: Option<&Value>) -> Option<BTreeMap<ClientId, f64>> {
    let obj = match params? {
        Value::Object(obj) => obj,
        Value::Null => return None,
        other => {
            tracing::warn!(params = %other, "over params are not a score map; ignored");
            return None;
        }
    };
    let mut scores = BTreeMap::new();
    for (client, v) in obj {
        match v.as_f64().filter(|f| f.is_finite()) {
            Some(score) => {
                scores.insert(ClientId::new(client.clone()), score);
            }
            None => tracing::warn!(client = %client, value = %v, "non-numeric score skipped"),
        }
    }
    Some(scores)
}
