//! `key = value` configuration with `RISKFUSE_<KEY>` environment overrides.
//!
//! ```text
//! # comments and blank lines are ignored
//! listen = 127.0.0.1:8080
//! checkpoint = model.ckpt
//! store = data/store
//! user = clinician
//! pass = change-me
//! workers = 1
//! queue_depth = 256
//! session_ttl_secs = 28800
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use crate::ServiceError;

pub const ENV_PREFIX: &str = "RISKFUSE_";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub listen: SocketAddr,
    pub checkpoint: PathBuf,
    pub store: PathBuf,
    pub user: String,
    pub pass: String,
    pub workers: usize,
    pub queue_depth: usize,
    pub session_ttl_secs: i64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: PathBuf::from("model.ckpt"),
            store: PathBuf::from("riskfuse-store"),
            user: "clinician".into(),
            pass: String::new(),
            workers: 1,
            queue_depth: 256,
            session_ttl_secs: 8 * 3600,
        }
    }
}

const KEYS: [&str; 8] = [
    "listen",
    "checkpoint",
    "store",
    "user",
    "pass",
    "workers",
    "queue_depth",
    "session_ttl_secs",
];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> ServiceError {
    ServiceError::Config(format!("{key} = {value:?}: {why}"))
}

impl Config {
    fn set(&mut self, key: &str, value: &str) -> Result<(), ServiceError> {
        let positive = |v: &str| match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            Ok(_) => Err(bad(key, v, "must be positive")),
            Err(e) => Err(bad(key, v, e)),
        };
        match key {
            "listen" => self.listen = value.parse().map_err(|e| bad(key, value, e))?,
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "store" => self.store = PathBuf::from(value),
            "user" => self.user = value.to_string(),
            "pass" => self.pass = value.to_string(),
            "workers" => self.workers = positive(value)?,
            "queue_depth" => self.queue_depth = positive(value)?,
            "session_ttl_secs" => self.session_ttl_secs = positive(value)? as i64,
            _ => {
                return Err(ServiceError::Config(format!(
                    "unknown key {key:?} (expected one of {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses file contents on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let mut config = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ServiceError::Config(format!("line {}: expected key = value", n + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| ServiceError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    /// Applies `RISKFUSE_<KEY>` overrides from `vars`.
    pub fn with_overrides(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ServiceError> {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                self.set(&key, value.trim()).map_err(|e| ServiceError::Config(format!("{name}: {e}")))?;
            }
        }
        Ok(self)
    }

    /// Reads `path`, then applies the process environment. Relative paths
    /// inside the file stay relative to the working directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)?.with_overrides(std::env::vars())?.checked()
    }

    pub fn checked(self) -> Result<Self, ServiceError> {
        if self.user.is_empty() || self.pass.is_empty() {
            return Err(ServiceError::Config("user and pass must both be set".into()));
        }
        Ok(self)
    }
}
