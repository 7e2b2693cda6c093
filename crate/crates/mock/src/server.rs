//! HTTP server speaking the archive API over an in-memory [`Archive`].
//!
//! The server runs on its own runtime so tests can stop it abruptly with
//! [`MockServer::kill`], which drops every open connection.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use archivefs::model::{encode_branch_target, encode_dir_entry, encode_release, encode_revision};
use archivefs::{ObjectType, Swhid};
use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};

use crate::fixture::Archive;

/// API endpoint families, used to target faults and filter the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Content,
    Raw,
    Directory,
    Revision,
    Release,
    Snapshot,
    Visits,
    Search,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultKind {
    /// Holds the response back.
    Delay(Duration),
    /// Answers with this status and an empty body.
    Status(u16),
    /// Answers 429 with a `Retry-After` header.
    RateLimit { retry_after_secs: u64 },
    /// Announces the full length but drops the connection after this many
    /// body bytes.
    Truncate(usize),
}

#[derive(Debug, Clone)]
pub struct Fault {
    pub endpoint: Endpoint,
    /// Restricts the fault to requests naming this object or origin.
    pub target: Option<String>,
    pub kind: FaultKind,
    /// Number of requests still affected; `None` for all of them.
    pub remaining: Option<usize>,
}

impl Fault {
    pub fn new(endpoint: Endpoint, kind: FaultKind) -> Self {
        Fault {
            endpoint,
            target: None,
            kind,
            remaining: None,
        }
    }

    pub fn on(mut self, target: impl Into<String>) -> Self {
        self.target = Some(target.into());
        self
    }

    pub fn times(mut self, n: usize) -> Self {
        self.remaining = Some(n);
        self
    }
}

#[derive(Debug, Clone)]
pub struct MockOptions {
    /// Entries per page for directory listings, snapshot branches and visits.
    pub page_size: usize,
    /// Whether the graph endpoint answers at all.
    pub graph: bool,
    /// Whether graph lines carry committer dates.
    pub graph_dates: bool,
    pub faults: Vec<Fault>,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            page_size: 1000,
            graph: true,
            graph_dates: true,
            faults: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoggedRequest {
    pub at: Instant,
    pub endpoint: Option<Endpoint>,
    /// Path and query as received.
    pub path: String,
}

struct ServerState {
    archive: RwLock<Archive>,
    options: Mutex<MockOptions>,
    log: Mutex<Vec<LoggedRequest>>,
    base: String,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    runtime: Option<tokio::runtime::Runtime>,
}

const API_PREFIX: &str = "/api/1/";

impl MockServer {
    /// Serves `archive` on an ephemeral localhost port.
    pub fn start(archive: Archive) -> std::io::Result<Self> {
        Self::start_on(archive, "127.0.0.1:0".parse().expect("address"))
    }

    pub fn start_on(archive: Archive, addr: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .thread_name("mock-archive")
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let state = Arc::new(ServerState {
            archive: RwLock::new(archive),
            options: Mutex::new(MockOptions::default()),
            log: Mutex::new(Vec::new()),
            base: format!("http://{addr}"),
        });
        let app = Router::new().fallback(handle).with_state(state.clone());
        runtime.spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                log::error!("mock server stopped: {e}");
            }
        });
        Ok(MockServer {
            addr,
            state,
            runtime: Some(runtime),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL of the API, ending with `/`.
    pub fn base_url(&self) -> String {
        format!("{}{API_PREFIX}", self.state.base)
    }

    pub fn set_options(&self, f: impl FnOnce(&mut MockOptions)) {
        f(&mut self.state.options.lock().unwrap());
    }

    pub fn add_fault(&self, fault: Fault) {
        self.set_options(|o| o.faults.push(fault));
    }

    pub fn clear_faults(&self) {
        self.set_options(|o| o.faults.clear());
    }

    /// Adds objects while the server is running.
    pub fn extend_archive(&self, more: &Archive) {
        self.state.archive.write().unwrap().merge(more);
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.state.log.lock().unwrap().clone()
    }

    pub fn requests_to(&self, endpoint: Endpoint) -> Vec<LoggedRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.endpoint == Some(endpoint))
            .collect()
    }

    pub fn clear_log(&self) {
        self.state.log.lock().unwrap().clear();
    }

    /// Stops serving immediately, closing every connection.
    pub fn kill(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }

    pub fn is_running(&self) -> bool {
        self.runtime.is_some()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.kill();
    }
}

#[derive(Debug)]
enum Route {
    Content(Swhid),
    Raw(Swhid),
    Directory(Swhid),
    Revision(Swhid),
    Release(Swhid),
    Snapshot(Swhid),
    Visits(String),
    Search(String),
    Graph(Swhid),
}

impl Route {
    fn endpoint(&self) -> Endpoint {
        match self {
            Route::Content(_) => Endpoint::Content,
            Route::Raw(_) => Endpoint::Raw,
            Route::Directory(_) => Endpoint::Directory,
            Route::Revision(_) => Endpoint::Revision,
            Route::Release(_) => Endpoint::Release,
            Route::Snapshot(_) => Endpoint::Snapshot,
            Route::Visits(_) => Endpoint::Visits,
            Route::Search(_) => Endpoint::Search,
            Route::Graph(_) => Endpoint::Graph,
        }
    }

    /// Identifier the request is about, matched against fault targets.
    fn target(&self) -> String {
        match self {
            Route::Content(id)
            | Route::Raw(id)
            | Route::Directory(id)
            | Route::Revision(id)
            | Route::Release(id)
            | Route::Snapshot(id)
            | Route::Graph(id) => id.to_string(),
            Route::Visits(s) | Route::Search(s) => s.clone(),
        }
    }
}

fn percent_decode(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn object(ty: ObjectType, hash: &str) -> Option<Swhid> {
    Swhid::new(ty, hash).ok()
}

fn parse_route(path: &str) -> Option<Route> {
    let rest = path.strip_prefix(API_PREFIX)?;
    let rest = rest.strip_suffix('/').unwrap_or(rest);
    if let Some(r) = rest.strip_prefix("content/sha1_git:") {
        return match r.strip_suffix("/raw") {
            Some(h) => object(ObjectType::Content, h).map(Route::Raw),
            None => object(ObjectType::Content, r).map(Route::Content),
        };
    }
    if let Some(h) = rest.strip_prefix("directory/") {
        return object(ObjectType::Directory, h).map(Route::Directory);
    }
    if let Some(h) = rest.strip_prefix("revision/") {
        return object(ObjectType::Revision, h).map(Route::Revision);
    }
    if let Some(h) = rest.strip_prefix("release/") {
        return object(ObjectType::Release, h).map(Route::Release);
    }
    if let Some(h) = rest.strip_prefix("snapshot/") {
        return object(ObjectType::Snapshot, h).map(Route::Snapshot);
    }
    if let Some(p) = rest.strip_prefix("origin/search/") {
        return percent_decode(p).map(Route::Search);
    }
    if let Some(o) = rest.strip_prefix("origin/") {
        return o
            .strip_suffix("/visits")
            .and_then(percent_decode)
            .map(Route::Visits);
    }
    if let Some(s) = rest.strip_prefix("graph/visit/nodes/") {
        return s.parse().ok().map(Route::Graph);
    }
    None
}

fn query_param(uri: &Uri, key: &str) -> Option<String> {
    uri.query()?.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == key).then(|| percent_decode(v).unwrap_or_default())
    })
}

/// Error response with a JSON body shaped like the public API's.
fn status(code: StatusCode) -> Response {
    let reason = code.canonical_reason().unwrap_or("error");
    (
        code,
        [(header::CONTENT_TYPE, "application/json")],
        json!({ "exception": reason, "reason": reason }).to_string(),
    )
        .into_response()
}

fn json_response(value: &Value, next: Option<String>) -> Response {
    let mut resp = (
        [(header::CONTENT_TYPE, "application/json")],
        value.to_string(),
    )
        .into_response();
    if let Some(next) = next {
        if let Ok(v) = HeaderValue::from_str(&format!("<{next}>; rel=\"next\"")) {
            resp.headers_mut().insert(header::LINK, v);
        }
    }
    resp
}

/// Slice `page` of `items` and the link to the following page, if any.
fn paginate<T: Clone>(
    items: &[T],
    page: usize,
    size: usize,
    base: &str,
    path: &str,
) -> (Vec<T>, Option<String>) {
    let size = size.max(1);
    let start = page.saturating_mul(size).min(items.len());
    let end = start.saturating_add(size).min(items.len());
    let next = (end < items.len()).then(|| format!("{base}{path}?page={}", page + 1));
    (items[start..end].to_vec(), next)
}

/// Applies matching faults; returns a response to send instead of the real
/// one, or a truncation length for the body.
async fn apply_faults(state: &ServerState, route: &Route) -> Result<Option<usize>, Response> {
    let endpoint = route.endpoint();
    let target = route.target();
    let mut delay = Duration::ZERO;
    let mut outcome: Result<Option<usize>, Response> = Ok(None);
    {
        let mut opts = state.options.lock().unwrap();
        for f in opts.faults.iter_mut() {
            if f.endpoint != endpoint
                || f.remaining == Some(0)
                || f.target.as_ref().is_some_and(|t| *t != target)
            {
                continue;
            }
            if let Some(n) = f.remaining.as_mut() {
                *n -= 1;
            }
            match &f.kind {
                FaultKind::Delay(d) => delay += *d,
                FaultKind::Status(code) if outcome.is_ok() => {
                    let code = StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
                    outcome = Err(status(code));
                }
                FaultKind::RateLimit { retry_after_secs } if outcome.is_ok() => {
                    let mut resp = status(StatusCode::TOO_MANY_REQUESTS);
                    resp.headers_mut()
                        .insert(header::RETRY_AFTER, HeaderValue::from(*retry_after_secs));
                    outcome = Err(resp);
                }
                FaultKind::Truncate(n) if matches!(outcome, Ok(None)) => outcome = Ok(Some(*n)),
                _ => {}
            }
        }
    }
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    outcome
}

async fn handle(State(state): State<Arc<ServerState>>, uri: Uri) -> Response {
    let path = uri.path().to_owned();
    let route = parse_route(&path);
    state.log.lock().unwrap().push(LoggedRequest {
        at: Instant::now(),
        endpoint: route.as_ref().map(Route::endpoint),
        path: uri
            .path_and_query()
            .map(|p| p.as_str().to_owned())
            .unwrap_or_else(|| path.clone()),
    });
    let Some(route) = route else {
        return status(StatusCode::NOT_FOUND);
    };
    let truncate = match apply_faults(&state, &route).await {
        Ok(t) => t,
        Err(resp) => return resp,
    };
    let page: usize = query_param(&uri, "page")
        .and_then(|p| p.parse().ok())
        .unwrap_or(0);
    let (page_size, graph, graph_dates) = {
        let o = state.options.lock().unwrap();
        (o.page_size, o.graph, o.graph_dates)
    };
    let archive = state.archive.read().unwrap();
    let base = &state.base;
    match route {
        Route::Content(id) => match archive.contents.get(&id) {
            Some(data) => json_response(
                &json!({
                    "length": data.len(),
                    "status": "visible",
                    "checksums": { "sha1_git": id.hash() },
                    "data_url": format!("{base}{API_PREFIX}content/sha1_git:{}/raw/", id.hash()),
                }),
                None,
            ),
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Raw(id) => match archive.contents.get(&id) {
            Some(data) => raw_body(data.clone(), truncate),
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Directory(id) => match archive.directories.get(&id) {
            Some(entries) => {
                let docs: Vec<Value> = entries.iter().map(|e| encode_dir_entry(&id, e)).collect();
                let (items, next) = paginate(&docs, page, page_size, base, &path);
                json_response(&Value::Array(items), next)
            }
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Revision(id) => match archive.revisions.get(&id) {
            Some(r) => json_response(&encode_revision(r), None),
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Release(id) => match archive.releases.get(&id) {
            Some(r) => json_response(&encode_release(r), None),
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Snapshot(id) => match archive.snapshots.get(&id) {
            Some(branches) => {
                let all: Vec<(&String, Value)> = branches
                    .iter()
                    .map(|(name, t)| (name, encode_branch_target(t)))
                    .collect();
                let (items, next) = paginate(&all, page, page_size, base, &path);
                let map: serde_json::Map<String, Value> =
                    items.into_iter().map(|(k, v)| (k.clone(), v)).collect();
                json_response(&json!({ "id": id.hash(), "branches": map }), next)
            }
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Visits(url) => match archive.origins.get(&url) {
            Some(visits) => {
                // newest first, like the public API
                let newest_first: Vec<Value> = visits.iter().rev().cloned().collect();
                let (items, next) = paginate(&newest_first, page, page_size, base, &path);
                json_response(&Value::Array(items), next)
            }
            None => status(StatusCode::NOT_FOUND),
        },
        Route::Search(pattern) => {
            let limit: usize = query_param(&uri, "limit")
                .and_then(|l| l.parse().ok())
                .unwrap_or(100);
            let terms: Vec<String> = pattern.split_whitespace().map(str::to_lowercase).collect();
            let hits: Vec<Value> = archive
                .origins
                .keys()
                .filter(|url| {
                    let url = url.to_lowercase();
                    terms.iter().all(|t| url.contains(t.as_str()))
                })
                .take(limit)
                .map(|url| json!({ "url": url }))
                .collect();
            json_response(&Value::Array(hits), None)
        }
        Route::Graph(id) => {
            if !graph {
                return status(StatusCode::FORBIDDEN);
            }
            if id.object_type() != ObjectType::Revision || !archive.revisions.contains_key(&id) {
                return status(StatusCode::NOT_FOUND);
            }
            let mut seen = std::collections::HashSet::from([id]);
            let mut queue = VecDeque::from([id]);
            let mut body = String::new();
            while let Some(r) = queue.pop_front() {
                let meta = &archive.revisions[&r];
                if graph_dates {
                    body.push_str(&format!("{r} {}\n", meta.committer_date.to_rfc3339()));
                } else {
                    body.push_str(&format!("{r}\n"));
                }
                for p in &meta.parents {
                    if seen.insert(*p) {
                        queue.push_back(*p);
                    }
                }
            }
            ([(header::CONTENT_TYPE, "text/plain")], body).into_response()
        }
    }
}

fn raw_body(data: Vec<u8>, truncate: Option<usize>) -> Response {
    let len = data.len();
    let body = match truncate {
        None => Body::from(data),
        Some(n) => {
            let head = Bytes::from(data[..n.min(len)].to_vec());
            // the pause lets the partial body reach the socket before the reset
            let cut = async {
                tokio::time::sleep(Duration::from_millis(20)).await;
                Err(std::io::Error::new(
                    std::io::ErrorKind::ConnectionReset,
                    "injected truncation",
                ))
            };
            let chunks = futures::StreamExt::chain(
                futures::stream::once(async move { Ok::<_, std::io::Error>(head) }),
                futures::stream::once(cut),
            );
            Body::from_stream(chunks)
        }
    };
    let mut resp = Response::new(body);
    resp.headers_mut().insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/octet-stream"),
    );
    resp.headers_mut()
        .insert(header::CONTENT_LENGTH, HeaderValue::from(len));
    resp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes() {
        let h = "a".repeat(40);
        assert!(matches!(
            parse_route(&format!("/api/1/content/sha1_git:{h}/raw/")),
            Some(Route::Raw(_))
        ));
        assert!(matches!(
            parse_route(&format!("/api/1/directory/{h}/")),
            Some(Route::Directory(_))
        ));
        match parse_route("/api/1/origin/https://example.org/a%20b.git/visits/") {
            Some(Route::Visits(u)) => assert_eq!(u, "https://example.org/a b.git"),
            other => panic!("{other:?}"),
        }
        match parse_route("/api/1/origin/search/torvalds%20linux/") {
            Some(Route::Search(p)) => assert_eq!(p, "torvalds linux"),
            other => panic!("{other:?}"),
        }
        assert!(parse_route("/api/1/directory/XYZ/").is_none());
        assert!(parse_route("/other").is_none());
    }

    #[test]
    fn pagination_links() {
        let items: Vec<u32> = (0..5).collect();
        let (p0, n0) = paginate(&items, 0, 2, "http://h", "/x/");
        assert_eq!(p0, vec![0, 1]);
        assert_eq!(n0.as_deref(), Some("http://h/x/?page=1"));
        let (p2, n2) = paginate(&items, 2, 2, "http://h", "/x/");
        assert_eq!(p2, vec![4]);
        assert_eq!(n2, None);
    }
}
