use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServeError;

/// Overrides the configured port when set.
pub const PORT_ENV: &str = "FASTPITCH_PORT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Checkpoint directory.
    pub checkpoint: PathBuf,
    /// Where sessions are stored.
    pub data_dir: PathBuf,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_host")]
    pub host: IpAddr,
}

fn default_port() -> u16 {
    8080
}

fn default_host() -> IpAddr {
    IpAddr::V4(Ipv4Addr::LOCALHOST)
}

impl ServerConfig {
    pub fn new(checkpoint: PathBuf, data_dir: PathBuf) -> Self {
        Self {
            checkpoint,
            data_dir,
            port: default_port(),
            host: default_host(),
        }
    }

    /// Reads a `.toml` or `.json` file; relative paths inside it resolve
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ServeError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => {
                toml::from_str(&text).map_err(|e| ServeError::Config(format!("{}: {e}", path.display())))?
            }
            Some("json") => {
                serde_json::from_str(&text).map_err(|e| ServeError::Config(format!("{}: {e}", path.display())))?
            }
            _ => {
                return Err(ServeError::Config(format!(
                    "{}: expected a .toml or .json file",
                    path.display()
                )))
            }
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.checkpoint = base.join(&cfg.checkpoint);
        cfg.data_dir = base.join(&cfg.data_dir);
        Ok(cfg)
    }

    /// Applies `FASTPITCH_PORT` from `lookup` (normally `std::env::var`).
    pub fn with_env_port(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ServeError> {
        if let Some(value) = lookup(PORT_ENV) {
            self.port = value
                .trim()
                .parse()
                .map_err(|_| ServeError::Config(format!("{PORT_ENV}={value:?} is not a port number")))?;
        }
        Ok(self)
    }
}
