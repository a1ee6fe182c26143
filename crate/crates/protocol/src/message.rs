use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::fields;

/// One of the three parties a message can travel between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    System,
    Client,
    Manager,
}

impl Endpoint {
    pub const ALL: [Endpoint; 3] = [Endpoint::System, Endpoint::Client, Endpoint::Manager];

    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::System => "system",
            Endpoint::Client => "client",
            Endpoint::Manager => "manager",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Endpoint {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(Endpoint::System),
            "client" => Ok(Endpoint::Client),
            "manager" => Ok(Endpoint::Manager),
            _ => Err(()),
        }
    }
}

/// Topics reserved for platform-originated traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemTopic {
    /// A new instance was formed.
    Instance,
    /// A member finished loading the game interface.
    Ready,
    /// The instance is finished; sent by the GM, echoed to members.
    Over,
    /// A member disconnected and the instance was aborted.
    Drop,
    /// A platform or GM fault.
    Error,
    /// Waiting-room status shown to players before an instance forms.
    Queued,
    /// Health probe sent to a GM before publishing a game.
    Ping,
}

impl SystemTopic {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemTopic::Instance => "instance",
            SystemTopic::Ready => "ready",
            SystemTopic::Over => "over",
            SystemTopic::Drop => "drop",
            SystemTopic::Error => "error",
            SystemTopic::Queued => "queued",
            SystemTopic::Ping => "ping",
        }
    }

    pub fn parse(topic: &str) -> Option<Self> {
        Some(match topic {
            "instance" => SystemTopic::Instance,
            "ready" => SystemTopic::Ready,
            "over" => SystemTopic::Over,
            "drop" => SystemTopic::Drop,
            "error" => SystemTopic::Error,
            "queued" => SystemTopic::Queued,
            "ping" => SystemTopic::Ping,
            _ => return None,
        })
    }
}

impl fmt::Display for SystemTopic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.0)
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d).map(Self)
            }
        }
    };
}

opaque_id!(
    /// Identifies one running instance. Compared by equality only.
    InstanceId
);
opaque_id!(
    /// Anonymous per-instance stand-in for a player.
    ClientId
);

/// Envelope rule broken by a message.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("topic must not be empty")]
    EmptyTopic,
    #[error("broadcast=true and clientId are mutually exclusive")]
    BroadcastWithClientId,
    #[error("a message to a client needs either clientId or broadcast=true")]
    UnaddressedClientMessage,
    #[error("extension field `{0}` shadows an envelope field")]
    ReservedExtension(String),
}

/// The universal protocol envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: Option<Endpoint>,
    pub recipient: Option<Endpoint>,
    pub topic: String,
    pub params: Option<Value>,
    pub instance_id: Option<InstanceId>,
    pub client_id: Option<ClientId>,
    pub broadcast: bool,
    /// Fields this codec does not know about, preserved verbatim.
    pub extensions: Map<String, Value>,
}

impl Message {
    pub fn new(topic: impl Into<String>) -> Self {
        Message {
            sender: None,
            recipient: None,
            topic: topic.into(),
            params: None,
            instance_id: None,
            client_id: None,
            broadcast: false,
            extensions: Map::new(),
        }
    }

    /// A platform-originated message on one of the reserved topics.
    pub fn system(topic: SystemTopic) -> Self {
        Message::new(topic.as_str()).sent_by(Endpoint::System)
    }

    pub fn sent_by(mut self, sender: Endpoint) -> Self {
        self.sender = Some(sender);
        self
    }

    pub fn addressed_to(mut self, recipient: Endpoint) -> Self {
        self.recipient = Some(recipient);
        self
    }

    pub fn with_params(mut self, params: Value) -> Self {
        self.params = Some(params);
        self
    }

    pub fn in_instance(mut self, id: InstanceId) -> Self {
        self.instance_id = Some(id);
        self
    }

    pub fn for_client(mut self, id: ClientId) -> Self {
        self.client_id = Some(id);
        self
    }

    pub fn broadcast(mut self) -> Self {
        self.broadcast = true;
        self
    }

    pub fn system_topic(&self) -> Option<SystemTopic> {
        SystemTopic::parse(&self.topic)
    }

    /// Checks the envelope rules that every encoded or decoded message obeys.
    pub fn validate(&self) -> Result<(), Violation> {
        if self.topic.is_empty() {
            return Err(Violation::EmptyTopic);
        }
        if self.broadcast && self.client_id.is_some() {
            return Err(Violation::BroadcastWithClientId);
        }
        if self.recipient == Some(Endpoint::Client) && !self.broadcast && self.client_id.is_none()
        {
            return Err(Violation::UnaddressedClientMessage);
        }
        if let Some(key) = self.extensions.keys().find(|k| fields::ALL.contains(&k.as_str())) {
            return Err(Violation::ReservedExtension(key.clone()));
        }
        Ok(())
    }
}

impl serde::Serialize for Message {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;

        let mut map = s.serialize_map(None)?;
        if let Some(sender) = self.sender {
            map.serialize_entry(fields::SENDER, sender.as_str())?;
        }
        if let Some(recipient) = self.recipient {
            map.serialize_entry(fields::RECIPIENT, recipient.as_str())?;
        }
        map.serialize_entry(fields::TOPIC, &self.topic)?;
        if let Some(params) = &self.params {
            map.serialize_entry(fields::PARAMS, params)?;
        }
        if let Some(id) = &self.instance_id {
            map.serialize_entry(fields::INSTANCE_ID, id)?;
        }
        if let Some(id) = &self.client_id {
            map.serialize_entry(fields::CLIENT_ID, id)?;
        }
        if self.broadcast {
            map.serialize_entry(fields::BROADCAST, &true)?;
        }
        for (k, v) in &self.extensions {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> serde::Deserialize<'de> for Message {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        crate::codec::from_value(value).map_err(serde::de::Error::custom)
    }
}
