//! Relay platform that connects browser clients with researcher-hosted
//! Game Managers: matchmaking, sessions, game instances, registries and the
//! HTTP surface tying them together.

pub mod client;
pub mod config;
pub mod events;
pub mod games;
pub mod gm;
pub mod ids;
pub mod instance;
pub mod matchmaking;
pub mod platform;
pub mod server;
pub mod session;
pub mod store;
pub mod testkit;
pub mod users;

pub use config::{ConfigError, PlatformConfig};
pub use events::{Event, EventLog, SessionRef};
pub use games::{GameDescriptor, GameManifest, GameRegistry, GameStatus};
pub use gm::{GmClient, GmEndpoint, GmError};
pub use ids::{AccountId, ClientId, GameId, InstanceId, SessionToken};
pub use instance::{GameInstance, InstanceState};
pub use users::{Identity, UserRegistry};
pub use xtribe_protocol as protocol;
pub use platform::{JoinOutcome, Platform, PlatformError, PublishError, StartupError};
