//! Layered configuration: command-line flags override environment
//! variables, which override the configuration file, which overrides the
//! built-in defaults.
//!
//! The file is TOML, by default at `~/.config/archivefs/config`:
//!
//! ```toml
//! api_base_url = "https://archive.softwareheritage.org/api/1/"
//! auth_token = "..."
//! cache_dir = "/home/me/.cache/archivefs"
//! direntry_capacity = 10000
//! blob_size_limit = 67108864   # bytes
//! retries = 3
//! timeout = 60                 # seconds, per request
//! connect_timeout = 10         # seconds
//! foreground = false
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use archivefs::cache::{CacheConfig, DEFAULT_BLOB_SIZE_LIMIT, DEFAULT_DIRENTRY_CAPACITY};
use archivefs::client::ClientConfig;
use serde::Deserialize;

pub const ENV_API_URL: &str = "ARCHIVEFS_API_URL";
pub const ENV_CACHE_DIR: &str = "ARCHIVEFS_CACHE_DIR";
pub const ENV_CONFIG: &str = "ARCHIVEFS_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration file {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
}

/// One configuration layer; unset fields fall through to the next one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub api_base_url: Option<String>,
    pub auth_token: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub direntry_capacity: Option<usize>,
    pub blob_size_limit: Option<u64>,
    pub retries: Option<u32>,
    pub timeout: Option<u64>,
    pub connect_timeout: Option<u64>,
    pub foreground: Option<bool>,
}

impl Layer {
    pub fn parse(text: &str, path: &Path) -> Result<Layer, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    /// The environment overrides, read through `var`.
    pub fn from_env(var: impl Fn(&str) -> Option<String>) -> Layer {
        let set = |name: &str| var(name).filter(|v| !v.is_empty());
        Layer {
            api_base_url: set(ENV_API_URL),
            cache_dir: set(ENV_CACHE_DIR).map(PathBuf::from),
            ..Layer::default()
        }
    }

    /// `self` with unset fields taken from `lower`.
    pub fn over(self, lower: Layer) -> Layer {
        Layer {
            api_base_url: self.api_base_url.or(lower.api_base_url),
            auth_token: self.auth_token.or(lower.auth_token),
            cache_dir: self.cache_dir.or(lower.cache_dir),
            direntry_capacity: self.direntry_capacity.or(lower.direntry_capacity),
            blob_size_limit: self.blob_size_limit.or(lower.blob_size_limit),
            retries: self.retries.or(lower.retries),
            timeout: self.timeout.or(lower.timeout),
            connect_timeout: self.connect_timeout.or(lower.connect_timeout),
            foreground: self.foreground.or(lower.foreground),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub api_base_url: String,
    pub auth_token: Option<String>,
    pub cache_dir: PathBuf,
    pub direntry_capacity: usize,
    pub blob_size_limit: u64,
    pub retries: u32,
    pub timeout: Duration,
    pub connect_timeout: Duration,
    pub foreground: bool,
}

pub fn default_cache_dir() -> PathBuf {
    dirs::cache_dir()
        .unwrap_or_else(std::env::temp_dir)
        .join("archivefs")
}

pub fn default_config_path() -> Option<PathBuf> {
    dirs::home_dir().map(|h| h.join(".config").join("archivefs").join("config"))
}

impl Default for Config {
    fn default() -> Self {
        let client = ClientConfig::default();
        Config {
            api_base_url: client.base_url,
            auth_token: None,
            cache_dir: default_cache_dir(),
            direntry_capacity: DEFAULT_DIRENTRY_CAPACITY,
            blob_size_limit: DEFAULT_BLOB_SIZE_LIMIT,
            retries: client.retries,
            timeout: client.timeout,
            connect_timeout: client.connect_timeout,
            foreground: false,
        }
    }
}

impl Config {
    /// Fills every field from the first layer that sets it.
    pub fn from_layer(layer: Layer) -> Config {
        let d = Config::default();
        Config {
            api_base_url: layer.api_base_url.unwrap_or(d.api_base_url),
            auth_token: layer.auth_token.or(d.auth_token),
            cache_dir: layer.cache_dir.unwrap_or(d.cache_dir),
            direntry_capacity: layer.direntry_capacity.unwrap_or(d.direntry_capacity),
            blob_size_limit: layer.blob_size_limit.unwrap_or(d.blob_size_limit),
            retries: layer.retries.unwrap_or(d.retries),
            timeout: layer.timeout.map_or(d.timeout, Duration::from_secs),
            connect_timeout: layer
                .connect_timeout
                .map_or(d.connect_timeout, Duration::from_secs),
            foreground: layer.foreground.unwrap_or(d.foreground),
        }
    }

    /// Resolves the configuration from flags, the process environment and
    /// the configuration file. `explicit_path` (from a flag) must exist;
    /// the default file is optional.
    pub fn load(flags: Layer, explicit_path: Option<&Path>) -> Result<Config, ConfigError> {
        let env = Layer::from_env(|k| std::env::var(k).ok());
        let env_path = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
        let (path, required) = match (explicit_path, env_path) {
            (Some(p), _) => (Some(p.to_owned()), true),
            (None, Some(p)) => (Some(p), true),
            (None, None) => (default_config_path(), false),
        };
        let file = match path {
            Some(path) => match std::fs::read_to_string(&path) {
                Ok(text) => Layer::parse(&text, &path)?,
                Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => Layer::default(),
                Err(source) => return Err(ConfigError::Read { path, source }),
            },
            None => Layer::default(),
        };
        Ok(Config::from_layer(flags.over(env).over(file)))
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            base_url: self.api_base_url.clone(),
            auth_token: self.auth_token.clone(),
            timeout: self.timeout,
            connect_timeout: self.connect_timeout,
            retries: self.retries,
            ..ClientConfig::default()
        }
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            dir: self.cache_dir.clone(),
            direntry_capacity: self.direntry_capacity,
            blob_size_limit: self.blob_size_limit,
        }
    }
}
