//! Identifier newtypes that never leave the platform, plus token generation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use xtribe_protocol::{ClientId, InstanceId};

/// Hex-encoded random token of `bytes` bytes from the thread-local CSPRNG.
pub fn random_token(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::rng().fill(&mut buf[..]);
    hex::encode(buf)
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
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
    };
}

string_id!(
    /// Slug naming a deployed game, also its URL prefix.
    GameId
);
string_id!(
    /// Private account identifier. Never sent to a GM.
    AccountId
);

impl GameId {
    /// Lowercase ASCII letters, digits and `-`, 1 to 64 characters.
    pub fn is_valid_slug(s: &str) -> bool {
        !s.is_empty()
            && s.len() <= 64
            && s.bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
    }
}

impl AccountId {
    pub fn generate() -> Self {
        Self(format!("acct-{}", random_token(12)))
    }
}

/// Secret bearer token of a client session.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SessionToken(String);

impl SessionToken {
    pub fn generate() -> Self {
        Self(random_token(32))
    }

    pub fn from_header(s: &str) -> Self {
        Self(s.to_owned())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for SessionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionToken(***)")
    }
}

/// Fresh opaque instance identifier.
pub fn new_instance_id() -> InstanceId {
    InstanceId::new(random_token(8))
}

/// Fresh anonymous client identifier. Unrelated to any account or session.
pub fn new_client_id() -> ClientId {
    ClientId::new(random_token(8))
}
