//! Platform configuration, read from a TOML file.
//!
//! Every key is optional; an empty file yields [`PlatformConfig::default`].
//! Durations are given in seconds and may be fractional.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::gm::DEFAULT_MAX_RESPONSE_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformConfig {
    pub listen: SocketAddr,
    pub data_dir: Option<PathBuf>,
    pub waiting_room_timeout: Duration,
    pub loading_timeout: Duration,
    pub liveness_window: Duration,
    pub gm_request_timeout: Duration,
    pub poll_linger: Duration,
    pub max_response_bytes: usize,
    pub max_queued_messages: usize,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: None,
            waiting_room_timeout: Duration::from_secs(120),
            loading_timeout: Duration::from_secs(30),
            liveness_window: Duration::from_secs(20),
            gm_request_timeout: Duration::from_secs(10),
            poll_linger: Duration::from_secs(25),
            max_response_bytes: DEFAULT_MAX_RESPONSE_BYTES,
            max_queued_messages: 1024,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("`{key}` must be a positive number of seconds, got {value}")]
    BadDuration { key: &'static str, value: f64 },
    #[error("`{0}` must be positive")]
    BadLimit(&'static str),
    #[error("port 0 is not a valid listen port")]
    BadPort,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen: Option<SocketAddr>,
    data_dir: Option<PathBuf>,
    waiting_room_timeout_s: Option<f64>,
    loading_timeout_s: Option<f64>,
    liveness_window_s: Option<f64>,
    gm_request_timeout_s: Option<f64>,
    poll_linger_s: Option<f64>,
    max_response_bytes: Option<usize>,
    max_queued_messages: Option<usize>,
}

fn seconds(key: &'static str, value: Option<f64>, default: Duration) -> Result<Duration, ConfigError> {
    match value {
        None => Ok(default),
        Some(v) if v.is_finite() && v > 0.0 && v < 1e9 => Ok(Duration::from_secs_f64(v)),
        Some(v) => Err(ConfigError::BadDuration { key, value: v }),
    }
}

impl PlatformConfig {
    /// Parses config text. `toml` errors carry line and column.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let d = PlatformConfig::default();
        let cfg = PlatformConfig {
            listen: raw.listen.unwrap_or(d.listen),
            data_dir: raw.data_dir,
            waiting_room_timeout: seconds("waiting_room_timeout_s", raw.waiting_room_timeout_s, d.waiting_room_timeout)?,
            loading_timeout: seconds("loading_timeout_s", raw.loading_timeout_s, d.loading_timeout)?,
            liveness_window: seconds("liveness_window_s", raw.liveness_window_s, d.liveness_window)?,
            gm_request_timeout: seconds("gm_request_timeout_s", raw.gm_request_timeout_s, d.gm_request_timeout)?,
            poll_linger: seconds("poll_linger_s", raw.poll_linger_s, d.poll_linger)?,
            max_response_bytes: raw.max_response_bytes.unwrap_or(d.max_response_bytes),
            max_queued_messages: raw.max_queued_messages.unwrap_or(d.max_queued_messages),
        };
        if cfg.listen.port() == 0 {
            return Err(ConfigError::BadPort);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Checks durations and limits. The listen port is checked only when
    /// parsing, so tests can bind ephemeral ports.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, d) in [
            ("waiting_room_timeout_s", self.waiting_room_timeout),
            ("loading_timeout_s", self.loading_timeout),
            ("liveness_window_s", self.liveness_window),
            ("gm_request_timeout_s", self.gm_request_timeout),
            ("poll_linger_s", self.poll_linger),
        ] {
            if d.is_zero() {
                return Err(ConfigError::BadDuration { key, value: 0.0 });
            }
        }
        if self.max_response_bytes == 0 {
            return Err(ConfigError::BadLimit("max_response_bytes"));
        }
        if self.max_queued_messages == 0 {
            return Err(ConfigError::BadLimit("max_queued_messages"));
        }
        Ok(())
    }

    /// How often the reaper checks liveness and timeouts.
    pub fn reap_interval(&self) -> Duration {
        (self.liveness_window / 4)
            .min(self.loading_timeout / 4)
            .clamp(Duration::from_millis(50), Duration::from_secs(1))
    }
}
