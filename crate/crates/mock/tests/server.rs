use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use archivefs_mock::{golden, Endpoint, Fault, FaultKind, MockServer, GOLDEN_ORIGIN};

struct Reply {
    status: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Reply {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

/// Plain HTTP/1.1 GET, read to end of stream.
fn get(server: &MockServer, path_and_query: &str) -> std::io::Result<Reply> {
    let mut stream = TcpStream::connect(server.addr())?;
    stream.set_read_timeout(Some(Duration::from_secs(20)))?;
    write!(
        stream,
        "GET /api/1/{path_and_query} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
    )?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw)?;
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .expect("header terminator");
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut lines = head.lines();
    let status = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let headers = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .collect();
    Ok(Reply {
        status,
        headers,
        body: raw[split + 4..].to_vec(),
    })
}

fn start() -> (archivefs_mock::Fixture, MockServer) {
    let fixture = golden();
    let server = MockServer::start(fixture.archive.clone()).unwrap();
    (fixture, server)
}

#[test]
fn serves_objects_and_not_found() {
    let (fixture, server) = start();
    let head = fixture.manifest.head();
    let reply = get(&server, &format!("revision/{}/", head.hash())).unwrap();
    assert_eq!(reply.status, 200);
    assert_eq!(reply.json()["id"], head.hash());
    assert_eq!(get(&server, &format!("revision/{}/", "0".repeat(40))).unwrap().status, 404);
    assert_eq!(get(&server, "no/such/endpoint/").unwrap().status, 404);
    let (blob, data) = fixture.manifest.blobs.iter().next().unwrap();
    let raw = get(&server, &format!("content/sha1_git:{}/raw/", blob.hash())).unwrap();
    assert_eq!(&raw.body, data);
}

#[test]
fn paginates_with_link_headers() {
    let (fixture, server) = start();
    server.set_options(|o| o.page_size = 1);
    let url = GOLDEN_ORIGIN.replace(':', "%3A").replace('/', "%2F");
    let first = get(&server, &format!("origin/{url}/visits/")).unwrap();
    assert_eq!(first.json().as_array().unwrap().len(), 1);
    let link = first.header("link").expect("next link");
    assert!(link.ends_with("rel=\"next\""));
    let next = link.trim_start_matches('<').split('>').next().unwrap();
    let next = &next[next.find("/api/1/").unwrap() + "/api/1/".len()..];
    let second = get(&server, next).unwrap();
    assert_eq!(second.json().as_array().unwrap().len(), 1);
    assert!(second.header("link").is_none());
    assert_eq!(fixture.manifest.origins[GOLDEN_ORIGIN].len(), 2);
}

#[test]
fn faults_apply_to_their_target_and_run_out() {
    let (fixture, server) = start();
    let head = fixture.manifest.head();
    let other = fixture.manifest.revisions[&head].parents[0];
    server.add_fault(Fault::new(Endpoint::Revision, FaultKind::Status(500)).on(head.to_string()).times(2));
    let path = |id: &archivefs::Swhid| format!("revision/{}/", id.hash());
    assert_eq!(get(&server, &path(&other)).unwrap().status, 200);
    assert_eq!(get(&server, &path(&head)).unwrap().status, 500);
    assert_eq!(get(&server, &path(&head)).unwrap().status, 500);
    assert_eq!(get(&server, &path(&head)).unwrap().status, 200);

    server.add_fault(Fault::new(Endpoint::Revision, FaultKind::RateLimit { retry_after_secs: 3 }).times(1));
    let limited = get(&server, &path(&head)).unwrap();
    assert_eq!(limited.status, 429);
    assert_eq!(limited.header("retry-after"), Some("3"));
}

#[test]
fn delays_hold_back_only_their_endpoint() {
    let (fixture, server) = start();
    server.add_fault(Fault::new(Endpoint::Revision, FaultKind::Delay(Duration::from_millis(400))));
    let head = fixture.manifest.head();
    let started = Instant::now();
    get(&server, &format!("revision/{}/", head.hash())).unwrap();
    assert!(started.elapsed() >= Duration::from_millis(400));
    let tree = fixture.manifest.revisions[&head].tree;
    let started = Instant::now();
    get(&server, &format!("directory/{}/", tree.hash())).unwrap();
    assert!(started.elapsed() < Duration::from_millis(400));
}

#[test]
fn truncation_cuts_the_body_short() {
    let (fixture, server) = start();
    let (blob, data) = fixture
        .manifest
        .blobs
        .iter()
        .find(|(_, d)| d.len() > 20)
        .unwrap();
    server.add_fault(Fault::new(Endpoint::Raw, FaultKind::Truncate(5)));
    let reply = get(&server, &format!("content/sha1_git:{}/raw/", blob.hash())).unwrap();
    assert_eq!(reply.header("content-length"), Some(data.len().to_string().as_str()));
    assert_eq!(reply.body, &data[..5]);
}

#[test]
fn graph_endpoint_can_be_switched_off() {
    let (fixture, server) = start();
    let head = fixture.manifest.head();
    let path = format!("graph/visit/nodes/{head}/?edges=rev:rev&return_types=rev");
    let reply = get(&server, &path).unwrap();
    assert_eq!(reply.status, 200);
    let lines = String::from_utf8(reply.body).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert!(lines.lines().all(|l| l.split(' ').count() == 2));
    server.set_options(|o| o.graph_dates = false);
    let lines = String::from_utf8(get(&server, &path).unwrap().body).unwrap();
    assert!(lines.lines().all(|l| l.split(' ').count() == 1));
    server.set_options(|o| o.graph = false);
    assert_ne!(get(&server, &path).unwrap().status, 200);
}

#[test]
fn search_respects_the_limit() {
    let (_, server) = start();
    let reply = get(&server, "origin/search/golden/?limit=5").unwrap();
    let urls: Vec<_> = reply.json().as_array().unwrap().iter().map(|o| o["url"].clone()).collect();
    assert_eq!(urls, vec![serde_json::Value::from(GOLDEN_ORIGIN)]);
    let reply = get(&server, "origin/search/example/?limit=0").unwrap();
    assert!(reply.json().as_array().unwrap().len() <= 1);
}

#[test]
fn request_log_and_kill() {
    let (fixture, mut server) = start();
    let head = fixture.manifest.head();
    get(&server, &format!("revision/{}/", head.hash())).unwrap();
    get(&server, "snapshot/zz/").unwrap();
    assert_eq!(server.requests().len(), 2);
    assert_eq!(server.requests_to(Endpoint::Revision).len(), 1);
    assert!(server.requests_to(Endpoint::Revision)[0].path.contains(head.hash()));
    server.clear_log();
    assert!(server.requests().is_empty());
    assert!(server.is_running());
    server.kill();
    assert!(!server.is_running());
    assert!(get(&server, "revision/x/").is_err());
}
