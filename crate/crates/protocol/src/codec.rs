use serde_json::{Map, Value};

use crate::fields;
use crate::message::{ClientId, Endpoint, InstanceId, Message, Violation};

/// Why a wire text could not be turned into a [`Message`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("input is not JSON: {0}")]
    Syntax(String),
    #[error("expected a JSON object, found {0}")]
    NotAnObject(&'static str),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("envelope rule violated: {0}")]
    Envelope(#[from] Violation),
    #[error("message {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: Box<DecodeError>,
    },
}

impl DecodeError {
    /// The envelope field the error is about, when there is one.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            DecodeError::MissingField(f) | DecodeError::InvalidField { field: f, .. } => Some(f),
            DecodeError::Envelope(Violation::EmptyTopic) => Some(fields::TOPIC),
            DecodeError::Envelope(Violation::BroadcastWithClientId) => Some(fields::BROADCAST),
            DecodeError::Envelope(Violation::UnaddressedClientMessage) => Some(fields::CLIENT_ID),
            DecodeError::Element { source, .. } => source.field(),
            _ => None,
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DecodeError {
    DecodeError::InvalidField {
        field,
        reason: reason.into(),
    }
}

fn take_endpoint(obj: &mut Map<String, Value>, field: &'static str) -> Result<Option<Endpoint>, DecodeError> {
    match obj.remove(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => s
            .parse()
            .map(Some)
            .map_err(|_| invalid(field, format!("unknown endpoint `{s}`"))),
        Some(other) => Err(invalid(field, format!("expected a string, found {}", kind(&other)))),
    }
}

/// Identifiers are strings on the wire; integral numbers are accepted too,
/// since GMs written in loosely typed languages sometimes emit them.
fn take_id(obj: &mut Map<String, Value>, field: &'static str) -> Result<Option<String>, DecodeError> {
    match obj.remove(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.is_empty() => Err(invalid(field, "identifier is empty")),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(Value::Number(n)) if n.is_u64() || n.is_i64() => Ok(Some(n.to_string())),
        Some(other) => Err(invalid(field, format!("expected a string, found {}", kind(&other)))),
    }
}

pub(crate) fn from_value(value: Value) -> Result<Message, DecodeError> {
    let mut obj = match value {
        Value::Object(obj) => obj,
        other => return Err(DecodeError::NotAnObject(kind(&other))),
    };

    let topic = match obj.remove(fields::TOPIC) {
        None | Some(Value::Null) => return Err(DecodeError::MissingField(fields::TOPIC)),
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(invalid(
                fields::TOPIC,
                format!("expected a string, found {}", kind(&other)),
            ))
        }
    };
    let sender = take_endpoint(&mut obj, fields::SENDER)?;
    let recipient = take_endpoint(&mut obj, fields::RECIPIENT)?;
    let params = obj.remove(fields::PARAMS);
    let instance_id = take_id(&mut obj, fields::INSTANCE_ID)?.map(InstanceId::new);
    let client_id = take_id(&mut obj, fields::CLIENT_ID)?.map(ClientId::new);
    let broadcast = match obj.remove(fields::BROADCAST) {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => b,
        Some(other) => {
            return Err(invalid(
                fields::BROADCAST,
                format!("expected a boolean, found {}", kind(&other)),
            ))
        }
    };

    let message = Message {
        sender,
        recipient,
        topic,
        params,
        instance_id,
        client_id,
        broadcast,
        extensions: obj,
    };
    message.validate()?;
    Ok(message)
}

/// Serializes a message to its JSON wire text after checking envelope rules.
/// Absent optional fields are omitted, never written as `null`.
pub fn encode_message(message: &Message) -> Result<String, Violation> {
    message.validate()?;
    Ok(serde_json::to_string(message).expect("message serialization is infallible"))
}

/// Encodes a batch the way a GM writes its response body: a single object
/// for one message, an array otherwise, and an empty body for none.
pub fn encode_gm_response(messages: &[Message]) -> Result<String, Violation> {
    match messages {
        [] => Ok(String::new()),
        [one] => encode_message(one),
        many => {
            for m in many {
                m.validate()?;
            }
            Ok(serde_json::to_string(many).expect("message serialization is infallible"))
        }
    }
}

pub fn decode_message(text: &str) -> Result<Message, DecodeError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    from_value(value)
}

/// Like [`decode_message`] but over raw bytes, as read off a socket.
pub fn decode_message_bytes(bytes: &[u8]) -> Result<Message, DecodeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| DecodeError::NotUtf8)?;
    decode_message(text)
}

/// Parses a GM response body. An empty body (or `[]`) means the GM chose not
/// to answer. Decoding is all-or-nothing: one bad element fails the batch.
pub fn decode_gm_response(body: &str) -> Result<Vec<Message>, DecodeError> {
    if body.trim().is_empty() {
        return Ok(Vec::new());
    }
    let value: Value =
        serde_json::from_str(body).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    match value {
        Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(index, item)| {
                from_value(item).map_err(|e| DecodeError::Element {
                    index,
                    source: Box::new(e),
                })
            })
            .collect(),
        Value::Object(_) => Ok(vec![from_value(value)?]),
        other => Err(DecodeError::NotAnObject(kind(&other))),
    }
}
