//! Typed client for the archive REST API.
//!
//! Every request goes through [`ArchiveClient::send`], which retries transient
//! failures with exponential backoff and honors `Retry-After` on HTTP 429.
//! Paginated endpoints follow the `Link: <...>; rel="next"` header.

use std::collections::{HashMap, HashSet, VecDeque};
use std::pin::Pin;
use std::time::Duration;

use bytes::Bytes;
use chrono::{DateTime, FixedOffset};
use futures::stream::{self, Stream, StreamExt, TryStreamExt};
use log::{debug, warn};
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use reqwest::header::{HeaderMap, AUTHORIZATION, CONTENT_LENGTH, LINK, RETRY_AFTER};
use reqwest::{Response, StatusCode};
use serde_json::Value;

use crate::model::{self, DecodeError, DirEntry, OriginVisit, ReleaseMeta, RevisionMeta, SnapshotBranches};
use crate::swhid::{ObjectType, Swhid};

/// Characters escaped when an origin URL is embedded in a request path.
const ORIGIN_PATH: &AsciiSet = &CONTROLS.add(b' ').add(b'"').add(b'#').add(b'%').add(b'?');
/// Characters escaped in a search pattern path segment.
const SEGMENT: &AsciiSet = &ORIGIN_PATH.add(b'/');

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("empty search pattern")]
    BadPattern,
    #[error("expected a {expected} identifier, got {got}")]
    WrongType { expected: ObjectType, got: Swhid },
    #[error("unexpected HTTP status {0}")]
    Status(u16),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) | ClientError::RateLimited { .. } => true,
            ClientError::Status(code) => *code >= 500,
            _ => false,
        }
    }

    /// True for failures that say nothing about the object itself.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            ClientError::Transport(_) | ClientError::RateLimited { .. } | ClientError::Status(_)
        )
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// API root, e.g. `https://archive.softwareheritage.org/api/1/`.
    pub base_url: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub connect_timeout: Duration,
    /// Extra attempts after the first one.
    pub retries: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// Idle persistent connections kept per host.
    pub max_idle_connections: usize,
    /// Concurrent metadata fetches when completing graph results.
    pub fetch_concurrency: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            base_url: "https://archive.softwareheritage.org/api/1/".into(),
            auth_token: None,
            timeout: Duration::from_secs(60),
            connect_timeout: Duration::from_secs(10),
            retries: 3,
            backoff_base: Duration::from_millis(200),
            backoff_cap: Duration::from_secs(10),
            max_idle_connections: 16,
            fetch_concurrency: 16,
        }
    }
}

/// A blob body being streamed from the server.
pub struct BlobStream {
    pub declared_length: Option<u64>,
    pub chunks: Pin<Box<dyn Stream<Item = Result<Bytes>> + Send>>,
}

impl BlobStream {
    /// Collects the whole body, checking it against the declared length.
    pub async fn collect(mut self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.declared_length.unwrap_or(0) as usize);
        while let Some(chunk) = self.chunks.next().await {
            out.extend_from_slice(&chunk?);
        }
        if let Some(n) = self.declared_length {
            if out.len() as u64 != n {
                return Err(ClientError::Transport(format!(
                    "short body: {} of {n} bytes",
                    out.len()
                )));
            }
        }
        Ok(out)
    }
}

/// One page of a paginated listing.
pub type Page = Vec<Value>;

#[derive(Clone)]
pub struct ArchiveClient {
    http: reqwest::Client,
    config: ClientConfig,
}

fn expect_type(id: &Swhid, expected: ObjectType) -> Result<()> {
    if id.object_type() == expected {
        Ok(())
    } else {
        Err(ClientError::WrongType { expected, got: *id })
    }
}

/// Extracts the `rel="next"` target of a `Link` header.
fn next_link(headers: &HeaderMap) -> Option<String> {
    for value in headers.get_all(LINK) {
        let Ok(value) = value.to_str() else { continue };
        for part in value.split(',') {
            let mut pieces = part.split(';');
            let Some(url) = pieces.next() else { continue };
            let is_next = pieces.any(|p| {
                let p = p.trim();
                p == "rel=\"next\"" || p == "rel=next"
            });
            if is_next {
                let url = url.trim().trim_start_matches('<').trim_end_matches('>');
                return Some(url.to_owned());
            }
        }
    }
    None
}

fn retry_after(headers: &HeaderMap) -> Option<Duration> {
    headers
        .get(RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

/// Pinned "git log" order: newest committer date first, ties broken by
/// ascending hash.
pub fn git_log_order(entries: &mut [(Swhid, DateTime<FixedOffset>)]) {
    entries.sort_by(|(a, da), (b, db)| db.cmp(da).then_with(|| a.hash().cmp(b.hash())));
}

impl ArchiveClient {
    pub fn new(mut config: ClientConfig) -> Result<Self> {
        if !config.base_url.ends_with('/') {
            config.base_url.push('/');
        }
        let mut headers = HeaderMap::new();
        if let Some(token) = &config.auth_token {
            let value = format!("Bearer {token}")
                .parse()
                .map_err(|_| ClientError::Transport("invalid auth token".into()))?;
            headers.insert(AUTHORIZATION, value);
        }
        let http = reqwest::Client::builder()
            .default_headers(headers)
            .timeout(config.timeout)
            .connect_timeout(config.connect_timeout)
            .pool_max_idle_per_host(config.max_idle_connections)
            .user_agent(concat!("archivefs/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(ArchiveClient { http, config })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url, path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.config
            .backoff_base
            .saturating_mul(factor)
            .min(self.config.backoff_cap)
    }

    async fn send_once(&self, url: &str) -> Result<Response> {
        let resp = self
            .http
            .get(url)
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        match resp.status() {
            s if s.is_success() => Ok(resp),
            StatusCode::NOT_FOUND => Err(ClientError::NotFound(url.to_owned())),
            StatusCode::TOO_MANY_REQUESTS => Err(ClientError::RateLimited {
                retry_after: retry_after(resp.headers()),
            }),
            s => Err(ClientError::Status(s.as_u16())),
        }
    }

    /// Issues a GET, retrying transient failures.
    async fn send(&self, url: &str) -> Result<Response> {
        let mut attempt = 0;
        loop {
            match self.send_once(url).await {
                Ok(resp) => return Ok(resp),
                Err(e) if e.retryable() && attempt < self.config.retries => {
                    let wait = match &e {
                        ClientError::RateLimited {
                            retry_after: Some(d),
                        } => *d,
                        _ => self.backoff(attempt),
                    };
                    debug!("GET {url} failed ({e}), retrying in {wait:?}");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Fetches a JSON body; returns the raw bytes, the parsed value and the
    /// next-page link if any. Body read failures are retried like request
    /// failures.
    async fn get_json(&self, url: &str) -> Result<(Bytes, Value, Option<String>)> {
        let mut attempt = 0;
        loop {
            let resp = self.send(url).await?;
            let next = next_link(resp.headers());
            match resp.bytes().await {
                Ok(body) => {
                    let value = serde_json::from_slice(&body).map_err(|e| {
                        ClientError::Decode(DecodeError {
                            what: "response",
                            reason: e.to_string(),
                        })
                    })?;
                    return Ok((body, value, next));
                }
                Err(e) if attempt < self.config.retries => {
                    debug!("reading {url} failed ({e}), retrying");
                    tokio::time::sleep(self.backoff(attempt)).await;
                    attempt += 1;
                }
                Err(e) => return Err(ClientError::Transport(e.to_string())),
            }
        }
    }

    async fn fetch_page(&self, url: &str) -> Result<(Page, Option<String>)> {
        let (_, value, next) = self.get_json(url).await?;
        match value {
            Value::Array(items) => Ok((items, next)),
            _ => Err(ClientError::Decode(DecodeError {
                what: "page",
                reason: "not an array".into(),
            })),
        }
    }

    /// Lazily yields the pages of a paginated array endpoint, starting at
    /// `first` (no pages at all when `None`).
    pub fn pages_from(
        &self,
        first: Option<String>,
    ) -> impl Stream<Item = Result<Page>> + Send + 'static {
        let client = self.clone();
        stream::try_unfold(first, move |next| {
            let client = client.clone();
            async move {
                let Some(url) = next else { return Ok(None) };
                let (page, next) = client.fetch_page(&url).await?;
                Ok(Some((page, next)))
            }
        })
    }

    fn pages(&self, first: String) -> impl Stream<Item = Result<Page>> + Send + 'static {
        self.pages_from(Some(first))
    }

    /// Content metadata document (`/content/sha1_git:<hash>/`).
    pub async fn content_doc(&self, id: &Swhid) -> Result<Bytes> {
        expect_type(id, ObjectType::Content)?;
        let url = self.url(&format!("content/sha1_git:{}/", id.hash()));
        Ok(self.get_json(&url).await?.0)
    }

    /// Streams the raw bytes of a content object.
    pub async fn get_blob(&self, id: &Swhid) -> Result<BlobStream> {
        expect_type(id, ObjectType::Content)?;
        let url = self.url(&format!("content/sha1_git:{}/raw/", id.hash()));
        let resp = self.send(&url).await?;
        let declared_length = resp
            .headers()
            .get(CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let chunks = resp
            .bytes_stream()
            .map_err(|e| ClientError::Transport(e.to_string()));
        Ok(BlobStream {
            declared_length,
            chunks: Box::pin(chunks),
        })
    }

    /// Pages of raw directory entries, fetched one at a time as the stream
    /// is polled.
    pub fn directory_pages(
        &self,
        id: &Swhid,
    ) -> Result<impl Stream<Item = Result<Page>> + Send + 'static> {
        expect_type(id, ObjectType::Directory)?;
        Ok(self.pages(self.url(&format!("directory/{}/", id.hash()))))
    }

    /// First page of a directory listing and the link to the next one.
    pub async fn directory_first_page(&self, id: &Swhid) -> Result<(Page, Option<String>)> {
        expect_type(id, ObjectType::Directory)?;
        self.fetch_page(&self.url(&format!("directory/{}/", id.hash())))
            .await
    }

    /// Every entry of a directory, following pagination lazily.
    pub fn list_directory(
        &self,
        id: &Swhid,
    ) -> Result<impl Stream<Item = Result<DirEntry>> + Send + 'static> {
        Ok(self
            .directory_pages(id)?
            .map_ok(|page| {
                stream::iter(
                    page.into_iter()
                        .map(|v| model::decode_dir_entry(&v).map_err(ClientError::from)),
                )
            })
            .try_flatten())
    }

    pub async fn revision_doc(&self, id: &Swhid) -> Result<Bytes> {
        expect_type(id, ObjectType::Revision)?;
        Ok(self
            .get_json(&self.url(&format!("revision/{}/", id.hash())))
            .await?
            .0)
    }

    pub async fn get_revision(&self, id: &Swhid) -> Result<RevisionMeta> {
        let doc = self.revision_doc(id).await?;
        let value: Value = serde_json::from_slice(&doc).expect("validated by get_json");
        Ok(model::decode_revision(&value)?)
    }

    pub async fn release_doc(&self, id: &Swhid) -> Result<Bytes> {
        expect_type(id, ObjectType::Release)?;
        Ok(self
            .get_json(&self.url(&format!("release/{}/", id.hash())))
            .await?
            .0)
    }

    pub async fn get_release(&self, id: &Swhid) -> Result<ReleaseMeta> {
        let doc = self.release_doc(id).await?;
        let value: Value = serde_json::from_slice(&doc).expect("validated by get_json");
        Ok(model::decode_release(&value)?)
    }

    /// Snapshot document with all branch pages merged into one object.
    pub async fn snapshot_doc(&self, id: &Swhid) -> Result<Value> {
        expect_type(id, ObjectType::Snapshot)?;
        let mut url = Some(self.url(&format!("snapshot/{}/", id.hash())));
        let mut merged: Option<Value> = None;
        while let Some(u) = url.take() {
            let (_, mut value, next) = self.get_json(&u).await?;
            match merged.as_mut() {
                None => merged = Some(value),
                Some(acc) => {
                    if let (Some(Value::Object(into)), Some(Value::Object(from))) =
                        (acc.get_mut("branches"), value.get_mut("branches"))
                    {
                        into.append(from);
                    }
                }
            }
            url = next;
        }
        Ok(merged.expect("at least one page"))
    }

    pub async fn get_snapshot(&self, id: &Swhid) -> Result<SnapshotBranches> {
        Ok(model::decode_snapshot(&self.snapshot_doc(id).await?)?)
    }

    /// All visits of an origin as one JSON array, in server order.
    pub async fn origin_visits_doc(&self, url: &str) -> Result<Value> {
        if url.is_empty() {
            return Err(ClientError::NotFound(String::new()));
        }
        let encoded = utf8_percent_encode(url, ORIGIN_PATH);
        let first = self.url(&format!("origin/{encoded}/visits/"));
        let pages: Vec<Page> = self.pages(first).try_collect().await?;
        Ok(Value::Array(pages.into_iter().flatten().collect()))
    }

    /// Visits of an origin, sorted ascending by date.
    pub async fn get_origin_visits(&self, url: &str) -> Result<Vec<OriginVisit>> {
        Ok(model::decode_visits(&self.origin_visits_doc(url).await?)?)
    }

    pub async fn search_origins(&self, pattern: &str, limit: usize) -> Result<Vec<String>> {
        if pattern.trim().is_empty() {
            return Err(ClientError::BadPattern);
        }
        let limit = limit.max(1);
        let encoded = utf8_percent_encode(pattern, SEGMENT);
        let url = self.url(&format!("origin/search/{encoded}/?limit={limit}"));
        let (_, value, _) = self.get_json(&url).await?;
        let urls = value
            .as_array()
            .ok_or_else(|| DecodeError {
                what: "search result",
                reason: "not an array".into(),
            })?
            .iter()
            .filter_map(|o| o.get("url").and_then(Value::as_str).map(str::to_owned))
            .take(limit)
            .collect();
        Ok(urls)
    }

    /// Raw graph traversal: every revision reachable from `id`, with the
    /// committer date when the server provides one.
    pub async fn graph_visit(
        &self,
        id: &Swhid,
    ) -> Result<Vec<(Swhid, Option<DateTime<FixedOffset>>)>> {
        expect_type(id, ObjectType::Revision)?;
        let url = self.url(&format!(
            "graph/visit/nodes/{id}/?edges=rev:rev&return_types=rev"
        ));
        let resp = self.send(&url).await?;
        let body = resp
            .text()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let mut out = Vec::new();
        for line in body.lines() {
            let mut fields = line.split_whitespace();
            let Some(first) = fields.next() else { continue };
            let node: Swhid = first.parse().map_err(|e| DecodeError {
                what: "graph visit",
                reason: format!("{e}"),
            })?;
            if node.object_type() != ObjectType::Revision {
                continue;
            }
            let date = fields
                .next()
                .and_then(|d| DateTime::parse_from_rfc3339(d).ok());
            out.push((node, date));
        }
        Ok(out)
    }

    /// Ancestors of `id` (excluding itself) in pinned git-log order, using
    /// the graph endpoint and falling back to [`Self::walk_parents`].
    pub async fn history(&self, id: &Swhid) -> Result<Vec<Swhid>> {
        expect_type(id, ObjectType::Revision)?;
        let nodes = match self.graph_visit(id).await {
            Ok(nodes) if nodes.iter().any(|(n, _)| n == id) => nodes,
            Ok(_) => {
                warn!("graph visit of {id} did not include the start node, walking parents");
                return self.walk_parents(id).await;
            }
            Err(e) => {
                debug!("graph endpoint unavailable for {id} ({e}), walking parents");
                return self.walk_parents(id).await;
            }
        };
        let mut dated = Vec::with_capacity(nodes.len());
        let mut missing = Vec::new();
        let mut seen = HashSet::new();
        for (node, date) in nodes {
            if node == *id || !seen.insert(node) {
                continue;
            }
            match date {
                Some(d) => dated.push((node, d)),
                None => missing.push(node),
            }
        }
        if !missing.is_empty() {
            // identifiers are all known up front, so these can run in parallel
            let fetched: Vec<(Swhid, DateTime<FixedOffset>)> = stream::iter(missing)
                .map(|node| async move {
                    self.get_revision(&node)
                        .await
                        .map(|m| (node, m.committer_date))
                })
                .buffer_unordered(self.config.fetch_concurrency.max(1))
                .try_collect()
                .await?;
            dated.extend(fetched);
        }
        git_log_order(&mut dated);
        Ok(dated.into_iter().map(|(n, _)| n).collect())
    }

    /// Same contract as [`Self::history`], computed with one revision
    /// request per commit.
    pub async fn walk_parents(&self, id: &Swhid) -> Result<Vec<Swhid>> {
        expect_type(id, ObjectType::Revision)?;
        let mut dates: HashMap<Swhid, DateTime<FixedOffset>> = HashMap::new();
        let mut queue = VecDeque::from([*id]);
        let mut seen = HashSet::from([*id]);
        while let Some(current) = queue.pop_front() {
            let meta = self.get_revision(&current).await?;
            if current != *id {
                dates.insert(current, meta.committer_date);
            }
            for parent in meta.parents {
                if seen.insert(parent) {
                    queue.push_back(parent);
                }
            }
        }
        let mut dated: Vec<_> = dates.into_iter().collect();
        git_log_order(&mut dated);
        Ok(dated.into_iter().map(|(n, _)| n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reqwest::header::HeaderValue;

    #[test]
    fn parses_link_header() {
        let mut h = HeaderMap::new();
        h.insert(
            LINK,
            HeaderValue::from_static(
                "<http://x/prev>; rel=\"previous\", <http://x/api/1/directory/ab/?page=2>; rel=\"next\"",
            ),
        );
        assert_eq!(
            next_link(&h).as_deref(),
            Some("http://x/api/1/directory/ab/?page=2")
        );
        assert_eq!(next_link(&HeaderMap::new()), None);
    }

    #[test]
    fn retry_after_seconds() {
        let mut h = HeaderMap::new();
        h.insert(RETRY_AFTER, HeaderValue::from_static("3"));
        assert_eq!(retry_after(&h), Some(Duration::from_secs(3)));
        h.insert(RETRY_AFTER, HeaderValue::from_static("soon"));
        assert_eq!(retry_after(&h), None);
    }

    #[test]
    fn backoff_is_capped() {
        let client = ArchiveClient::new(ClientConfig {
            backoff_base: Duration::from_millis(100),
            backoff_cap: Duration::from_secs(1),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(client.backoff(0), Duration::from_millis(100));
        assert_eq!(client.backoff(3), Duration::from_millis(800));
        assert_eq!(client.backoff(4), Duration::from_secs(1));
        assert_eq!(client.backoff(40), Duration::from_secs(1));
    }

    #[test]
    fn log_order_ties_by_hash() {
        let d = |s: &str| DateTime::parse_from_rfc3339(s).unwrap();
        let id = |c: char| {
            Swhid::new(ObjectType::Revision, &std::iter::repeat_n(c, 40).collect::<String>())
                .unwrap()
        };
        let mut v = vec![
            (id('b'), d("2020-01-01T00:00:00+00:00")),
            (id('c'), d("2021-01-01T00:00:00+00:00")),
            (id('a'), d("2020-01-01T01:00:00+01:00")),
        ];
        git_log_order(&mut v);
        let order: Vec<_> = v.iter().map(|(s, _)| s.hash().chars().next().unwrap()).collect();
        assert_eq!(order, vec!['c', 'a', 'b']);
    }

    #[tokio::test]
    async fn wrong_type_rejected_before_io() {
        let client = ArchiveClient::new(ClientConfig::default()).unwrap();
        let dir = Swhid::new(ObjectType::Directory, &"0".repeat(40)).unwrap();
        assert!(matches!(
            client.get_revision(&dir).await,
            Err(ClientError::WrongType { .. })
        ));
        assert!(matches!(
            client.search_origins("  ", 1).await,
            Err(ClientError::BadPattern)
        ));
    }
}
