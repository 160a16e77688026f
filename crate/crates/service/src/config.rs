//! Service configuration. Sources are layered: command-line flags override
//! environment variables, which override the TOML file, which overrides the
//! built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use meed::inference::DecodeConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const ENV_BIND: &str = "MEED_BIND";
pub const ENV_CHECKPOINT: &str = "MEED_CHECKPOINT";

/// Beam width used by the CLI and the server unless configured otherwise.
/// The full width of 256 over a large vocabulary is slow on a CPU.
pub const DESK_BEAM_WIDTH: usize = 8;

pub fn desk_decode() -> DecodeConfig {
    DecodeConfig {
        beam_width: DESK_BEAM_WIDTH,
        ..DecodeConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub bind: String,
    pub decode: DecodeConfig,
    pub idle_timeout_secs: u64,
    pub max_sessions: usize,
    /// Deadline for a whole request, waiting for the session included.
    pub request_timeout_ms: u64,
    /// Origins allowed to call the API from a browser.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            vocab: PathBuf::from("vocab.txt"),
            lexicon: None,
            bind: "127.0.0.1:8080".into(),
            decode: desk_decode(),
            idle_timeout_secs: 1800,
            max_sessions: 1024,
            request_timeout_ms: 30_000,
            cors_origins: vec!["http://localhost:5173".into()],
        }
    }
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub bind: Option<String>,
    pub beam_width: Option<usize>,
    pub max_len: Option<usize>,
    pub idle_timeout_secs: Option<u64>,
    pub max_sessions: Option<usize>,
    pub request_timeout_ms: Option<u64>,
    pub cors_origins: Option<Vec<String>>,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `env` (a variable lookup) over `self`, then `flags` over that.
    pub fn layered(mut self, env: impl Fn(&str) -> Option<String>, flags: &Overrides) -> Self {
        if let Some(b) = env(ENV_BIND) {
            self.bind = b;
        }
        if let Some(c) = env(ENV_CHECKPOINT) {
            self.checkpoint = c.into();
        }
        let f = flags.clone();
        if let Some(v) = f.checkpoint {
            self.checkpoint = v;
        }
        if let Some(v) = f.vocab {
            self.vocab = v;
        }
        if let Some(v) = f.lexicon {
            self.lexicon = Some(v);
        }
        if let Some(v) = f.bind {
            self.bind = v;
        }
        if let Some(v) = f.beam_width {
            self.decode.beam_width = v;
        }
        if let Some(v) = f.max_len {
            self.decode.max_len = v;
        }
        if let Some(v) = f.idle_timeout_secs {
            self.idle_timeout_secs = v;
        }
        if let Some(v) = f.max_sessions {
            self.max_sessions = v;
        }
        if let Some(v) = f.request_timeout_ms {
            self.request_timeout_ms = v;
        }
        if let Some(v) = f.cors_origins {
            self.cors_origins = v;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.decode.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        if self.idle_timeout_secs == 0 || self.request_timeout_ms == 0 {
            return Err(ServiceError::Config("timeouts must be positive".into()));
        }
        if self.max_sessions == 0 {
            return Err(ServiceError::Config("max_sessions must be at least 1".into()));
        }
        self.bind
            .parse::<std::net::SocketAddr>()
            .map_err(|e| ServiceError::Config(format!("bind address {:?}: {e}", self.bind)))?;
        Ok(())
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.idle_timeout_secs)
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}
