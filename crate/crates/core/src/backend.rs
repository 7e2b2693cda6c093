//! Archive access through the caches.
//!
//! Every lookup consults the persistent caches first and only then the
//! remote API; successful remote results are written back. Origin visit
//! lists are the exception: they are refreshed from the network when it is
//! reachable and served from the cache otherwise.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::pin::Pin;
use std::sync::{Arc, Mutex, Weak};

use futures::{Stream, StreamExt};
use log::{debug, warn};
use lru::LruCache;
use serde_json::Value;
use tokio::sync::watch;

use crate::cache::{history_key, origin_key, CacheError, CacheKind, Caches};
use crate::client::{ArchiveClient, ClientError, Page};
use crate::model::{self, ContentMeta, DirEntry, OriginVisit, ReleaseMeta, RevisionMeta, SnapshotBranches};
use crate::swhid::{ObjectType, Swhid};

#[derive(Debug, thiserror::Error)]
pub enum FsError {
    #[error("no such entry")]
    NotFound,
    #[error("archive unreachable: {0}")]
    Unavailable(String),
    #[error("invalid archive data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("read-only filesystem")]
    ReadOnly,
    #[error("not a directory")]
    NotADirectory,
}

impl FsError {
    pub fn errno(&self) -> i32 {
        match self {
            FsError::NotFound => libc::ENOENT,
            FsError::ReadOnly => libc::EROFS,
            FsError::NotADirectory => libc::ENOTDIR,
            FsError::Unavailable(_) | FsError::Invalid(_) | FsError::Cache(_) => libc::EIO,
        }
    }
}

impl From<ClientError> for FsError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::NotFound(_) | ClientError::WrongType { .. } => FsError::NotFound,
            ClientError::Decode(d) => FsError::Invalid(d.to_string()),
            ClientError::BadPattern => FsError::Invalid(e.to_string()),
            other => FsError::Unavailable(other.to_string()),
        }
    }
}

impl From<model::DecodeError> for FsError {
    fn from(e: model::DecodeError) -> Self {
        FsError::Invalid(e.to_string())
    }
}

pub type FsResult<T> = Result<T, FsError>;

fn parse_json(bytes: &[u8]) -> FsResult<Value> {
    serde_json::from_slice(bytes).map_err(|e| FsError::Invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, Default)]
struct BlobProgress {
    len: usize,
    done: bool,
    failed: bool,
}

/// Bytes of one blob, filled progressively by a download task.
pub struct BlobBuffer {
    data: Mutex<Vec<u8>>,
    progress: watch::Sender<BlobProgress>,
    error: Mutex<Option<String>>,
}

impl BlobBuffer {
    fn complete(bytes: Vec<u8>) -> Arc<Self> {
        let len = bytes.len();
        Arc::new(BlobBuffer {
            data: Mutex::new(bytes),
            progress: watch::Sender::new(BlobProgress {
                len,
                done: true,
                failed: false,
            }),
            error: Mutex::new(None),
        })
    }

    fn pending() -> Arc<Self> {
        Arc::new(BlobBuffer {
            data: Mutex::new(Vec::new()),
            progress: watch::Sender::new(BlobProgress::default()),
            error: Mutex::new(None),
        })
    }

    fn append(&self, chunk: &[u8]) {
        let len = {
            let mut data = self.data.lock().unwrap();
            data.extend_from_slice(chunk);
            data.len()
        };
        self.progress.send_modify(|p| p.len = len);
    }

    fn finish(&self) {
        self.progress.send_modify(|p| p.done = true);
    }

    fn fail(&self, reason: String) {
        *self.error.lock().unwrap() = Some(reason);
        self.progress.send_modify(|p| p.failed = true);
    }

    fn failed(&self) -> bool {
        self.progress.borrow().failed
    }

    pub fn is_complete(&self) -> bool {
        self.progress.borrow().done
    }

    /// Returns `bytes[offset..offset+size]`, waiting for the download to get
    /// that far. Reads past the end come back short or empty.
    pub async fn read(&self, offset: u64, size: usize) -> FsResult<Vec<u8>> {
        let mut rx = self.progress.subscribe();
        let start = usize::try_from(offset).unwrap_or(usize::MAX);
        let end = start.saturating_add(size);
        loop {
            let p = *rx.borrow_and_update();
            if p.failed {
                let reason = self.error.lock().unwrap().clone().unwrap_or_default();
                return Err(FsError::Unavailable(reason));
            }
            if p.len >= end || p.done {
                let data = self.data.lock().unwrap();
                let s = start.min(data.len());
                let e = end.min(data.len());
                return Ok(data[s..e].to_vec());
            }
            if rx.changed().await.is_err() {
                return Err(FsError::Unavailable("download abandoned".into()));
            }
        }
    }

    /// Waits for the whole blob.
    pub async fn read_all(&self) -> FsResult<Vec<u8>> {
        self.read(0, usize::MAX).await
    }
}

type PageStream = Pin<Box<dyn Stream<Item = Result<Page, ClientError>> + Send>>;

/// Lazily fetched directory listing. Pages are requested one at a time as
/// [`DirPages::next_page`] is called; the complete listing is written to the
/// caches once the last page arrives.
pub struct DirPages {
    id: Swhid,
    cached: Option<Arc<Vec<DirEntry>>>,
    first: Option<Page>,
    stream: Option<PageStream>,
    raw: Vec<Value>,
    entries: Vec<DirEntry>,
    backend: Arc<Backend>,
}

impl DirPages {
    pub async fn next_page(&mut self) -> FsResult<Option<Vec<DirEntry>>> {
        if let Some(all) = self.cached.take() {
            return Ok(Some(all.as_ref().clone()));
        }
        let next = match self.first.take() {
            Some(page) => Some(Ok(page)),
            None => match self.stream.as_mut() {
                Some(stream) => stream.next().await,
                None => return Ok(None),
            },
        };
        match next {
            Some(Ok(page)) => {
                let decoded = page
                    .iter()
                    .map(model::decode_dir_entry)
                    .collect::<Result<Vec<_>, _>>()?;
                self.raw.extend(page);
                self.entries.extend(decoded.iter().cloned());
                Ok(Some(decoded))
            }
            Some(Err(e)) => {
                self.stream = None;
                Err(e.into())
            }
            None => {
                self.stream = None;
                let doc = serde_json::to_vec(&Value::Array(std::mem::take(&mut self.raw)))
                    .expect("serializable");
                let entries = Arc::new(std::mem::take(&mut self.entries));
                self.backend.store_directory(self.id, &doc, entries)?;
                Ok(None)
            }
        }
    }
}

pub struct Backend {
    client: ArchiveClient,
    caches: Arc<Caches>,
    downloads: Mutex<HashMap<Swhid, Weak<BlobBuffer>>>,
    first_pages: Mutex<LruCache<Swhid, (Page, Option<String>)>>,
}

const FIRST_PAGE_MEMO: usize = 256;

impl Backend {
    pub fn new(client: ArchiveClient, caches: Arc<Caches>) -> Arc<Self> {
        Arc::new(Backend {
            client,
            caches,
            downloads: Mutex::new(HashMap::new()),
            first_pages: Mutex::new(LruCache::new(
                NonZeroUsize::new(FIRST_PAGE_MEMO).expect("nonzero"),
            )),
        })
    }

    pub fn client(&self) -> &ArchiveClient {
        &self.client
    }

    pub fn caches(&self) -> &Arc<Caches> {
        &self.caches
    }

    fn cached_meta(&self, key: &str) -> FsResult<Option<Vec<u8>>> {
        Ok(self.caches.get(CacheKind::Metadata, key)?)
    }

    fn store_meta(&self, key: &str, doc: &[u8]) {
        if let Err(e) = self.caches.put(CacheKind::Metadata, key, doc) {
            warn!("could not cache metadata for {key}: {e}");
        }
    }

    fn store_directory(
        &self,
        id: Swhid,
        doc: &[u8],
        entries: Arc<Vec<DirEntry>>,
    ) -> FsResult<()> {
        self.store_meta(&id.to_string(), doc);
        self.caches.direntry_put(id, entries);
        Ok(())
    }

    /// Raw metadata document of any object, as exposed by `<swhid>.json`.
    pub async fn metadata_doc(self: &Arc<Self>, id: &Swhid) -> FsResult<Vec<u8>> {
        let key = id.to_string();
        if let Some(doc) = self.cached_meta(&key)? {
            return Ok(doc);
        }
        let doc: Vec<u8> = match id.object_type() {
            ObjectType::Content => self.client.content_doc(id).await?.to_vec(),
            ObjectType::Revision => self.client.revision_doc(id).await?.to_vec(),
            ObjectType::Release => self.client.release_doc(id).await?.to_vec(),
            ObjectType::Snapshot => {
                serde_json::to_vec(&self.client.snapshot_doc(id).await?).expect("serializable")
            }
            ObjectType::Directory => {
                self.directory(id).await?;
                return self.cached_meta(&key)?.ok_or(FsError::NotFound);
            }
        };
        self.store_meta(&key, &doc);
        Ok(doc)
    }

    pub async fn content(self: &Arc<Self>, id: &Swhid) -> FsResult<ContentMeta> {
        let doc = self.metadata_doc(id).await?;
        Ok(model::decode_content(*id, &parse_json(&doc)?)?)
    }

    pub async fn revision(self: &Arc<Self>, id: &Swhid) -> FsResult<RevisionMeta> {
        if id.object_type() != ObjectType::Revision {
            return Err(FsError::NotFound);
        }
        let doc = self.metadata_doc(id).await?;
        Ok(model::decode_revision(&parse_json(&doc)?)?)
    }

    pub async fn release(self: &Arc<Self>, id: &Swhid) -> FsResult<ReleaseMeta> {
        if id.object_type() != ObjectType::Release {
            return Err(FsError::NotFound);
        }
        let doc = self.metadata_doc(id).await?;
        Ok(model::decode_release(&parse_json(&doc)?)?)
    }

    pub async fn snapshot(self: &Arc<Self>, id: &Swhid) -> FsResult<SnapshotBranches> {
        if id.object_type() != ObjectType::Snapshot {
            return Err(FsError::NotFound);
        }
        let doc = self.metadata_doc(id).await?;
        Ok(model::decode_snapshot(&parse_json(&doc)?)?)
    }

    fn cached_directory(&self, id: &Swhid) -> FsResult<Option<Arc<Vec<DirEntry>>>> {
        if let Some(entries) = self.caches.direntry_get(id) {
            return Ok(Some(entries));
        }
        if let Some(doc) = self.cached_meta(&id.to_string())? {
            let entries = Arc::new(model::decode_directory(&parse_json(&doc)?)?);
            self.caches.direntry_put(*id, entries.clone());
            return Ok(Some(entries));
        }
        Ok(None)
    }

    /// Checks that a directory object exists. Costs at most one request for
    /// the first listing page, which is kept for the next listing.
    pub async fn directory_exists(self: &Arc<Self>, id: &Swhid) -> FsResult<()> {
        if id.object_type() != ObjectType::Directory {
            return Err(FsError::NotFound);
        }
        if self.cached_directory(id)?.is_some() || self.first_pages.lock().unwrap().contains(id) {
            return Ok(());
        }
        let (page, next) = self.client.directory_first_page(id).await?;
        match next {
            None => {
                let entries = page
                    .iter()
                    .map(model::decode_dir_entry)
                    .collect::<Result<Vec<_>, _>>()?;
                let doc = serde_json::to_vec(&Value::Array(page)).expect("serializable");
                self.store_directory(*id, &doc, Arc::new(entries))?;
            }
            Some(_) => {
                self.first_pages.lock().unwrap().put(*id, (page, next));
            }
        }
        Ok(())
    }

    /// Starts a lazy listing of a directory object.
    pub fn directory_pages(self: &Arc<Self>, id: &Swhid) -> FsResult<DirPages> {
        if id.object_type() != ObjectType::Directory {
            return Err(FsError::NotFound);
        }
        let cached = self.cached_directory(id)?;
        let (first, stream) = if cached.is_some() {
            (None, None)
        } else if let Some((page, next)) = self.first_pages.lock().unwrap().pop(id) {
            let rest = Box::pin(self.client.pages_from(next)) as Pin<Box<_>>;
            (Some(page), Some(rest))
        } else {
            (None, Some(Box::pin(self.client.directory_pages(id)?) as Pin<Box<_>>))
        };
        Ok(DirPages {
            id: *id,
            cached,
            first,
            stream,
            raw: Vec::new(),
            entries: Vec::new(),
            backend: self.clone(),
        })
    }

    /// Complete listing of a directory object.
    pub async fn directory(self: &Arc<Self>, id: &Swhid) -> FsResult<Arc<Vec<DirEntry>>> {
        if let Some(entries) = self.cached_directory(id)? {
            return Ok(entries);
        }
        let mut pages = self.directory_pages(id)?;
        while pages.next_page().await?.is_some() {}
        self.cached_directory(id)?.ok_or(FsError::NotFound)
    }

    /// Opens a blob for reading. Cached blobs are served immediately; others
    /// are streamed by a background task shared between concurrent readers.
    pub fn open_blob(self: &Arc<Self>, id: &Swhid) -> FsResult<Arc<BlobBuffer>> {
        if id.object_type() != ObjectType::Content {
            return Err(FsError::NotFound);
        }
        if let Some(bytes) = self.caches.get(CacheKind::Blob, &id.to_string())? {
            return Ok(BlobBuffer::complete(bytes));
        }
        let mut downloads = self.downloads.lock().unwrap();
        if let Some(existing) = downloads.get(id).and_then(Weak::upgrade) {
            if !existing.failed() {
                return Ok(existing);
            }
        }
        let buffer = BlobBuffer::pending();
        downloads.insert(*id, Arc::downgrade(&buffer));
        drop(downloads);

        let backend = self.clone();
        let id = *id;
        let target = buffer.clone();
        tokio::spawn(async move {
            let result = backend.download(&id, &target).await;
            backend.downloads.lock().unwrap().remove(&id);
            match result {
                Ok(()) => target.finish(),
                Err(e) => {
                    debug!("download of {id} failed: {e}");
                    target.fail(e.to_string());
                }
            }
        });
        Ok(buffer)
    }

    async fn download(&self, id: &Swhid, target: &BlobBuffer) -> FsResult<()> {
        let mut blob = self.client.get_blob(id).await?;
        while let Some(chunk) = blob.chunks.next().await {
            target.append(&chunk?);
        }
        let data = target.data.lock().unwrap().clone();
        if let Some(n) = blob.declared_length {
            if data.len() as u64 != n {
                return Err(FsError::Unavailable(format!(
                    "short blob body: {} of {n} bytes",
                    data.len()
                )));
            }
        }
        if data.len() as u64 <= self.caches.blob_size_limit() {
            if let Err(e) = self.caches.put(CacheKind::Blob, &id.to_string(), &data) {
                warn!("could not cache blob {id}: {e}");
            }
        }
        Ok(())
    }

    /// Whole blob contents.
    pub async fn blob(self: &Arc<Self>, id: &Swhid) -> FsResult<Vec<u8>> {
        self.open_blob(id)?.read_all().await
    }

    /// Ancestors of a revision in pinned git-log order.
    pub async fn history(&self, rev: &Swhid) -> FsResult<Vec<Swhid>> {
        if rev.object_type() != ObjectType::Revision {
            return Err(FsError::NotFound);
        }
        let key = history_key(rev);
        if let Some(doc) = self.cached_meta(&key)? {
            return serde_json::from_slice(&doc).map_err(|e| FsError::Invalid(e.to_string()));
        }
        let list = self.client.history(rev).await?;
        self.store_meta(&key, &serde_json::to_vec(&list).expect("serializable"));
        Ok(list)
    }

    /// Visits of an origin; fresh from the network when possible.
    pub async fn origin_visits(&self, url: &str) -> FsResult<Vec<OriginVisit>> {
        let key = origin_key(url);
        match self.client.origin_visits_doc(url).await {
            Ok(doc) => {
                let visits = model::decode_visits(&doc)?;
                self.store_meta(&key, &serde_json::to_vec(&doc).expect("serializable"));
                Ok(visits)
            }
            Err(e) if e.is_transport() => match self.cached_meta(&key)? {
                Some(doc) => Ok(model::decode_visits(&parse_json(&doc)?)?),
                None => Err(e.into()),
            },
            Err(e) => Err(e.into()),
        }
    }

    /// Origin visits from the cache only.
    pub fn cached_origin_visits(&self, url: &str) -> FsResult<Option<Vec<OriginVisit>>> {
        match self.cached_meta(&origin_key(url))? {
            Some(doc) => Ok(Some(model::decode_visits(&parse_json(&doc)?)?)),
            None => Ok(None),
        }
    }
}
