//! Read-only view of a content-addressed software archive as a POSIX
//! directory tree.

pub mod backend;
pub mod cache;
pub mod client;
pub mod fuse;
pub mod layout;
pub mod model;
pub mod mount;
pub mod swhid;

pub use swhid::{ObjectType, Swhid};

use std::sync::Arc;

use cache::{CacheConfig, CacheError, Caches};
use client::{ArchiveClient, ClientConfig, ClientError};
use layout::{Layout, LayoutOptions};

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Wires a client, the caches and a layout together.
pub fn open_layout(
    client: ClientConfig,
    cache: &CacheConfig,
    options: LayoutOptions,
) -> Result<Arc<Layout>, SetupError> {
    let client = ArchiveClient::new(client)?;
    let caches = Arc::new(Caches::open(cache)?);
    Ok(Layout::new(backend::Backend::new(client, caches), options))
}
