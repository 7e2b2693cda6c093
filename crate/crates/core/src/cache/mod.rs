//! Blob, metadata and direntry caches.
//!
//! Archived objects never change, so nothing here invalidates: a record is
//! either present with the one correct payload or absent. The only mutable
//! keys are origin visit lists (`origin:<url>`), which are overwritten on
//! refresh.

mod direntry;
mod store;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};

pub use direntry::{DirentryCache, DEFAULT_DIRENTRY_CAPACITY};
pub use store::PersistentStore;

use crate::model::DirEntry;
use crate::swhid::{parse_swhid, ObjectType, Swhid};

pub const DEFAULT_BLOB_SIZE_LIMIT: u64 = 64 * 1024 * 1024;

const BLOB_FILE: &str = "blob.sqlite";
const METADATA_FILE: &str = "metadata.sqlite";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("cache I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid cache key {0:?}")]
    InvalidKey(String),
    #[error("blob of {size} bytes exceeds the {limit} byte cache limit")]
    TooLarge { size: u64, limit: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheKind {
    Blob,
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurgeFilter {
    All,
    /// Records inserted strictly before the given instant.
    Before(DateTime<Utc>),
}

/// Metadata key for an origin's visit list.
pub fn origin_key(url: &str) -> String {
    format!("origin:{url}")
}

/// Metadata key for the computed history of a revision.
pub fn history_key(rev: &Swhid) -> String {
    format!("history:{rev}")
}

fn is_mutable_key(key: &str) -> bool {
    key.starts_with("origin:")
}

#[derive(Debug, Clone)]
pub struct CacheConfig {
    pub dir: PathBuf,
    pub direntry_capacity: usize,
    pub blob_size_limit: u64,
}

impl CacheConfig {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CacheConfig {
            dir: dir.into(),
            direntry_capacity: DEFAULT_DIRENTRY_CAPACITY,
            blob_size_limit: DEFAULT_BLOB_SIZE_LIMIT,
        }
    }
}

pub struct Caches {
    blobs: PersistentStore,
    metadata: PersistentStore,
    direntries: DirentryCache,
    blob_size_limit: u64,
    dir: PathBuf,
}

impl Caches {
    pub fn open(config: &CacheConfig) -> Result<Self, CacheError> {
        std::fs::create_dir_all(&config.dir)?;
        Ok(Caches {
            blobs: PersistentStore::open(&config.dir.join(BLOB_FILE))?,
            metadata: PersistentStore::open(&config.dir.join(METADATA_FILE))?,
            direntries: DirentryCache::new(config.direntry_capacity),
            blob_size_limit: config.blob_size_limit,
            dir: config.dir.clone(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn blob_size_limit(&self) -> u64 {
        self.blob_size_limit
    }

    fn store(&self, kind: CacheKind) -> &PersistentStore {
        match kind {
            CacheKind::Blob => &self.blobs,
            CacheKind::Metadata => &self.metadata,
        }
    }

    pub fn get(&self, kind: CacheKind, key: &str) -> Result<Option<Vec<u8>>, CacheError> {
        self.store(kind).get(key)
    }

    pub fn put(&self, kind: CacheKind, key: &str, payload: &[u8]) -> Result<(), CacheError> {
        self.put_at(kind, key, payload, Utc::now())
    }

    /// Like [`Self::put`] with an explicit insertion time.
    pub fn put_at(
        &self,
        kind: CacheKind,
        key: &str,
        payload: &[u8],
        inserted_at: DateTime<Utc>,
    ) -> Result<(), CacheError> {
        if kind == CacheKind::Blob {
            match parse_swhid(key) {
                Ok(id) if id.object_type() == ObjectType::Content => {}
                _ => return Err(CacheError::InvalidKey(key.to_owned())),
            }
            if payload.len() as u64 > self.blob_size_limit {
                return Err(CacheError::TooLarge {
                    size: payload.len() as u64,
                    limit: self.blob_size_limit,
                });
            }
        }
        let store = self.store(kind);
        let mutable = is_mutable_key(key);
        if cfg!(debug_assertions) && !mutable {
            if let Some(existing) = store.get(key)? {
                debug_assert_eq!(
                    digest(&existing),
                    digest(payload),
                    "immutable cache key {key} written with different payloads"
                );
            }
        }
        store.put_at(key, payload, inserted_at.timestamp_millis(), mutable)
    }

    /// Removes one key from both persistent caches (and the direntry cache
    /// when it names a directory). Returns the number of records removed.
    pub fn remove(&self, key: &str) -> Result<usize, CacheError> {
        let mut n = usize::from(self.blobs.remove(key)?);
        n += usize::from(self.metadata.remove(key)?);
        if let Ok(id) = parse_swhid(key) {
            self.direntries.remove(&id);
            if id.object_type() == ObjectType::Revision {
                n += usize::from(self.metadata.remove(&history_key(&id))?);
            }
        }
        Ok(n)
    }

    /// Drops matching records from both persistent caches. The direntry
    /// cache is cleared whatever the filter, since it carries no timestamps.
    pub fn purge(&self, filter: PurgeFilter) -> Result<usize, CacheError> {
        let n = self.blobs.purge(&filter)? + self.metadata.purge(&filter)?;
        self.direntries.clear();
        Ok(n)
    }

    pub fn direntry_get(&self, dir: &Swhid) -> Option<Arc<Vec<DirEntry>>> {
        self.direntries.get(dir)
    }

    pub fn direntry_put(&self, dir: Swhid, entries: Arc<Vec<DirEntry>>) {
        self.direntries.put(dir, entries);
    }

    pub fn direntries(&self) -> &DirentryCache {
        &self.direntries
    }

    /// Every SWHID with a record in either persistent cache, sorted.
    pub fn cached_swhids(&self) -> Result<Vec<Swhid>, CacheError> {
        let mut ids: Vec<Swhid> = self
            .blobs
            .keys_with_prefix("swh:")?
            .into_iter()
            .chain(self.metadata.keys_with_prefix("swh:")?)
            .filter_map(|k| parse_swhid(&k).ok())
            .collect();
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    /// Origin URLs with a cached visit list.
    pub fn cached_origins(&self) -> Result<Vec<String>, CacheError> {
        Ok(self
            .metadata
            .keys_with_prefix("origin:")?
            .into_iter()
            .map(|k| k["origin:".len()..].to_owned())
            .collect())
    }
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}
