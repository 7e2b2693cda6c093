//! Support code for the `archivefs` command-line tool.

pub mod config;
pub mod syslog;

pub use config::{Config, ConfigError, Layer};
