//! Mapping from archive objects to a virtual directory tree.
//!
//! Paths are sequences of byte-string components below the mount root.
//! Resolution is lazy: looking up a path fetches only the objects named
//! along it. Sharing between objects is exposed as relative symlinks into
//! `archive/`, so every object has exactly one canonical directory.

pub mod history;
pub mod paths;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::backend::{Backend, BlobBuffer, DirPages, FsError, FsResult};
use crate::model::{valid_component, DirEntry, EntryPerm, OriginVisit, DEFAULT_ALIAS_DEPTH};
use crate::swhid::{parse_swhid, ObjectType, Swhid};

pub use history::{DateKey, HistoryViews};
pub use paths::{archive_link, decode_origin, encode_origin, relative_path, resolve_lexically};

/// Ancestors per `history/by-page/NNN` directory.
pub const PAGE_SIZE: usize = 10_000;

pub const README: &str = "\
archivefs: a read-only view of a software archive

archive/  every archived object by identifier, e.g. archive/swh:1:cnt:<hash>
          (archive/<id>.json holds the metadata document of <id>)
origin/   software by the URL it was archived from, percent-encoded,
          with one directory per visit
cache/    objects available locally; remove an entry to purge it

The path grammar is documented in docs/layout.md of the archivefs sources.
";

pub type Name = Vec<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Regular,
    Directory,
    Symlink,
}

/// What a node shows: the object or synthetic payload it is bound to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Render {
    MountRoot,
    Readme,
    ArchiveRoot,
    OriginRoot,
    CacheRoot,
    CacheShard(String),
    /// Blob bytes; for symlinks, the link target.
    Content(Swhid),
    /// Raw metadata document of an object.
    Metadata(Swhid),
    Directory(Swhid),
    Revision(Swhid),
    Parents(Swhid),
    History(Swhid),
    ByPage(Swhid),
    Page(Swhid, usize),
    ByHash(Swhid),
    HashShard(Swhid, String),
    ByDate(Swhid),
    DateBucket(Swhid, DateKey),
    DateStatus(Swhid),
    Release(Swhid),
    /// Branch-name prefix inside a snapshot.
    Snapshot(Swhid, Vec<Name>),
    Origin(String),
    Visit(String, u64),
    Link(Name),
    Text(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VNode {
    pub kind: NodeKind,
    pub size: u64,
    pub perm: u16,
    /// Seconds since the epoch.
    pub mtime: i64,
    /// Whether the node or its listing may change during a mount.
    pub volatile: bool,
    pub render: Render,
}

impl VNode {
    pub fn dir(render: Render, mtime: i64) -> Self {
        VNode {
            kind: NodeKind::Directory,
            size: 0,
            perm: 0o555,
            mtime,
            volatile: false,
            render,
        }
    }

    pub fn file(render: Render, size: u64, mtime: i64) -> Self {
        VNode {
            kind: NodeKind::Regular,
            size,
            perm: 0o444,
            mtime,
            volatile: false,
            render,
        }
    }

    pub fn link(target: Name, mtime: i64) -> Self {
        VNode {
            kind: NodeKind::Symlink,
            size: target.len() as u64,
            perm: 0o444,
            mtime,
            volatile: false,
            render: Render::Link(target),
        }
    }

    fn executable(mut self) -> Self {
        self.perm = 0o555;
        self
    }

    fn volatile(mut self) -> Self {
        self.volatile = true;
        self
    }

    pub fn is_dir(&self) -> bool {
        self.kind == NodeKind::Directory
    }
}

pub fn root_node() -> VNode {
    VNode::dir(Render::MountRoot, 0)
}

/// Bytes behind a regular file.
#[derive(Clone)]
pub enum FileContents {
    Blob(Arc<BlobBuffer>),
    Bytes(Arc<Vec<u8>>),
}

impl FileContents {
    pub async fn read(&self, offset: u64, size: usize) -> FsResult<Vec<u8>> {
        match self {
            FileContents::Blob(b) => b.read(offset, size).await,
            FileContents::Bytes(b) => {
                let start = usize::try_from(offset).unwrap_or(usize::MAX).min(b.len());
                let end = start.saturating_add(size).min(b.len());
                Ok(b[start..end].to_vec())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayoutOptions {
    pub page_size: usize,
    /// Parallel metadata fetches while filling `by-date/`.
    pub date_concurrency: usize,
    /// How long a fetched visit list is reused before asking again.
    pub origin_ttl: Duration,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions {
            page_size: PAGE_SIZE,
            date_concurrency: 16,
            origin_ttl: Duration::from_secs(5),
        }
    }
}

type VisitMemo = HashMap<String, (Instant, Arc<Vec<OriginVisit>>)>;

pub struct Layout {
    backend: Arc<Backend>,
    options: LayoutOptions,
    histories: Mutex<HashMap<Swhid, Arc<HistoryViews>>>,
    visits: Mutex<VisitMemo>,
}

fn not_found<T>() -> FsResult<T> {
    Err(FsError::NotFound)
}

fn name_str(name: &[u8]) -> FsResult<&str> {
    std::str::from_utf8(name).map_err(|_| FsError::NotFound)
}

fn swhid_name(name: &[u8]) -> FsResult<Swhid> {
    parse_swhid(name_str(name)?).map_err(|_| FsError::NotFound)
}

fn is_shard(name: &str) -> bool {
    name.len() == 2 && name.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn entry_point(name: &[u8]) -> Option<VNode> {
    Some(match name {
        b"archive" => VNode::dir(Render::ArchiveRoot, 0).volatile(),
        b"origin" => VNode::dir(Render::OriginRoot, 0).volatile(),
        b"cache" => VNode::dir(Render::CacheRoot, 0).volatile(),
        b"README" => VNode::file(Render::Readme, README.len() as u64, 0),
        _ => return None,
    })
}

/// Visit directory names: the UTC day of each visit with a snapshot,
/// suffixed `.2`, `.3`, ... when several visits share a day.
pub fn visit_names(visits: &[OriginVisit]) -> Vec<(String, &OriginVisit)> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    visits
        .iter()
        .filter(|v| v.snapshot.is_some())
        .map(|v| {
            let day = v.date.with_timezone(&chrono::Utc).format("%Y-%m-%d").to_string();
            let n = seen.entry(day.clone()).or_insert(0);
            *n += 1;
            let name = if *n == 1 { day } else { format!("{day}.{n}") };
            (name, v)
        })
        .collect()
}

fn pretty_json(raw: &serde_json::Value) -> Vec<u8> {
    let mut doc = serde_json::to_vec_pretty(raw).expect("serializable");
    doc.push(b'\n');
    doc
}

impl Layout {
    pub fn new(backend: Arc<Backend>, options: LayoutOptions) -> Arc<Self> {
        Arc::new(Layout {
            backend,
            options,
            histories: Mutex::new(HashMap::new()),
            visits: Mutex::new(HashMap::new()),
        })
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }

    pub fn options(&self) -> &LayoutOptions {
        &self.options
    }

    /// Resolves a path from the mount root. Symlinks are not followed.
    pub async fn resolve(self: &Arc<Self>, path: &[Name]) -> FsResult<VNode> {
        let mut node = root_node();
        for i in 0..path.len() {
            node = self.lookup(&path[..i], &node, &path[i]).await?;
        }
        Ok(node)
    }

    /// Child `name` of the directory `dir` located at `dir_path`.
    pub async fn lookup(
        self: &Arc<Self>,
        dir_path: &[Name],
        dir: &VNode,
        name: &[u8],
    ) -> FsResult<VNode> {
        if !dir.is_dir() {
            return Err(FsError::NotADirectory);
        }
        if !valid_component(name) {
            return not_found();
        }
        let mtime = dir.mtime;
        match &dir.render {
            Render::MountRoot => entry_point(name).ok_or(FsError::NotFound),
            Render::ArchiveRoot => self.archive_entry(name).await,
            Render::OriginRoot => {
                let url = decode_origin(name).ok_or(FsError::NotFound)?;
                self.visits(&url).await?;
                Ok(VNode::dir(Render::Origin(url), 0).volatile())
            }
            Render::CacheRoot => {
                let shard = name_str(name)?;
                let cached = self.backend.caches().cached_swhids()?;
                if is_shard(shard) && cached.iter().any(|id| id.shard_prefix(2) == shard) {
                    Ok(VNode::dir(Render::CacheShard(shard.to_owned()), 0).volatile())
                } else {
                    not_found()
                }
            }
            Render::CacheShard(shard) => {
                let id = swhid_name(name)?;
                let cached = self.backend.caches().cached_swhids()?;
                if id.shard_prefix(2) == shard && cached.contains(&id) {
                    Ok(VNode::link(archive_link(dir_path, &id), 0).volatile())
                } else {
                    not_found()
                }
            }
            Render::Page(rev, n) => {
                let id = swhid_name(name)?;
                let views = self.views(rev).await?;
                if views.page_of(&id, self.options.page_size) == Some(*n) {
                    Ok(VNode::link(archive_link(dir_path, &id), mtime))
                } else {
                    not_found()
                }
            }
            Render::HashShard(rev, shard) => {
                let id = swhid_name(name)?;
                let views = self.views(rev).await?;
                if id.shard_prefix(2) == shard && views.contains(&id) {
                    Ok(VNode::link(archive_link(dir_path, &id), mtime))
                } else {
                    not_found()
                }
            }
            Render::ByDate(rev) => {
                let views = self.dated_views(rev).await?;
                if name == b".status" {
                    return if views.is_complete() {
                        not_found()
                    } else {
                        let size = views.status_line().len() as u64;
                        Ok(VNode::file(Render::DateStatus(*rev), size, mtime).volatile())
                    };
                }
                let key = DateKey::child(None, name_str(name)?).ok_or(FsError::NotFound)?;
                if views.bucket_exists(&key) {
                    Ok(VNode::dir(Render::DateBucket(*rev, key), mtime).volatile())
                } else {
                    not_found()
                }
            }
            Render::DateBucket(rev, key) => {
                let views = self.dated_views(rev).await?;
                if key.depth() == 3 {
                    let id = swhid_name(name)?;
                    return if views.day_contains(key, &id) {
                        Ok(VNode::link(archive_link(dir_path, &id), mtime).volatile())
                    } else {
                        not_found()
                    };
                }
                let child = DateKey::child(Some(key), name_str(name)?).ok_or(FsError::NotFound)?;
                if views.bucket_exists(&child) {
                    Ok(VNode::dir(Render::DateBucket(*rev, child), mtime).volatile())
                } else {
                    not_found()
                }
            }
            _ => self
                .list(dir_path, dir)
                .await?
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, node)| node)
                .ok_or(FsError::NotFound),
        }
    }

    /// Full listing of the directory `dir` located at `dir_path`.
    pub async fn list(
        self: &Arc<Self>,
        dir_path: &[Name],
        dir: &VNode,
    ) -> FsResult<Vec<(Name, VNode)>> {
        if !dir.is_dir() {
            return Err(FsError::NotADirectory);
        }
        let mtime = dir.mtime;
        let link_here = |id: &Swhid| VNode::link(archive_link(dir_path, id), mtime);
        Ok(match &dir.render {
            Render::MountRoot => ["archive", "cache", "origin", "README"]
                .into_iter()
                .map(|name| {
                    let node = entry_point(name.as_bytes()).expect("entry point");
                    (name.as_bytes().to_vec(), node)
                })
                .collect(),
            Render::ArchiveRoot => {
                let mut out = Vec::new();
                for id in self.backend.caches().cached_swhids()? {
                    match self.archive_node(&id).await {
                        Ok(node) => out.push((id.to_string().into_bytes(), node)),
                        Err(e) => log::debug!("not listing {id}: {e}"),
                    }
                }
                out
            }
            Render::OriginRoot => self
                .backend
                .caches()
                .cached_origins()?
                .into_iter()
                .map(|url| {
                    let name = encode_origin(&url).into_bytes();
                    (name, VNode::dir(Render::Origin(url), 0).volatile())
                })
                .collect(),
            Render::CacheRoot => {
                let shards: BTreeSet<String> = self
                    .backend
                    .caches()
                    .cached_swhids()?
                    .iter()
                    .map(|id| id.shard_prefix(2).to_owned())
                    .collect();
                shards
                    .into_iter()
                    .map(|s| {
                        let name = s.clone().into_bytes();
                        (name, VNode::dir(Render::CacheShard(s), 0).volatile())
                    })
                    .collect()
            }
            Render::CacheShard(shard) => self
                .backend
                .caches()
                .cached_swhids()?
                .into_iter()
                .filter(|id| id.shard_prefix(2) == shard)
                .map(|id| (id.to_string().into_bytes(), link_here(&id).volatile()))
                .collect(),
            Render::Directory(id) => {
                let entries = self.backend.directory(id).await?;
                let mut out = Vec::with_capacity(entries.len());
                for e in entries.iter().filter(|e| e.has_valid_name()) {
                    out.push((e.name.clone(), self.entry_node(dir_path, e, mtime).await?));
                }
                out
            }
            Render::Revision(id) => {
                let meta = self.backend.revision(id).await?;
                let meta_json = format!("{id}.json");
                let mut out = vec![
                    (b"history".to_vec(), VNode::dir(Render::History(*id), mtime)),
                    (
                        b"meta.json".to_vec(),
                        VNode::link(relative_path(dir_path, &["archive", &meta_json]), mtime),
                    ),
                ];
                if !meta.parents.is_empty() {
                    out.push((b"parent".to_vec(), VNode::link(b"parents/1".to_vec(), mtime)));
                }
                out.push((b"parents".to_vec(), VNode::dir(Render::Parents(*id), mtime)));
                out.push((b"root".to_vec(), link_here(&meta.tree)));
                out
            }
            Render::Parents(id) => {
                let meta = self.backend.revision(id).await?;
                meta.parents
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((i + 1).to_string().into_bytes(), link_here(p)))
                    .collect()
            }
            Render::History(id) => vec![
                (b"by-date".to_vec(), VNode::dir(Render::ByDate(*id), mtime).volatile()),
                (b"by-hash".to_vec(), VNode::dir(Render::ByHash(*id), mtime)),
                (b"by-page".to_vec(), VNode::dir(Render::ByPage(*id), mtime)),
            ],
            Render::ByPage(id) => {
                let views = self.views(id).await?;
                (0..views.page_count(self.options.page_size))
                    .map(|n| {
                        let name = format!("{n:03}").into_bytes();
                        (name, VNode::dir(Render::Page(*id, n), mtime))
                    })
                    .collect()
            }
            Render::Page(id, n) => {
                let views = self.views(id).await?;
                views
                    .page(*n, self.options.page_size)
                    .iter()
                    .map(|a| (a.to_string().into_bytes(), link_here(a)))
                    .collect()
            }
            Render::ByHash(id) => {
                let views = self.views(id).await?;
                views
                    .shard_names()
                    .map(|s| {
                        let node = VNode::dir(Render::HashShard(*id, s.to_owned()), mtime);
                        (s.as_bytes().to_vec(), node)
                    })
                    .collect()
            }
            Render::HashShard(id, shard) => {
                let views = self.views(id).await?;
                views
                    .shard(shard)
                    .unwrap_or_default()
                    .iter()
                    .map(|a| (a.to_string().into_bytes(), link_here(a)))
                    .collect()
            }
            Render::ByDate(id) => {
                let views = self.dated_views(id).await?;
                let mut out = Vec::new();
                let status = views.status_line();
                let complete = views.is_complete();
                for year in views.date_children(None) {
                    let key = DateKey::child(None, &year).expect("well-formed");
                    let node = VNode::dir(Render::DateBucket(*id, key), mtime).volatile();
                    out.push((year.into_bytes(), node));
                }
                if !complete {
                    let node = VNode::file(Render::DateStatus(*id), status.len() as u64, mtime);
                    out.insert(0, (b".status".to_vec(), node.volatile()));
                }
                out
            }
            Render::DateBucket(id, key) => {
                let views = self.dated_views(id).await?;
                views
                    .date_children(Some(key))
                    .into_iter()
                    .map(|name| {
                        let node = if key.depth() == 3 {
                            let a = parse_swhid(&name).expect("well-formed");
                            link_here(&a).volatile()
                        } else {
                            let child = DateKey::child(Some(key), &name).expect("well-formed");
                            VNode::dir(Render::DateBucket(*id, child), mtime).volatile()
                        };
                        (name.into_bytes(), node)
                    })
                    .collect()
            }
            Render::Release(id) => {
                let meta = self.backend.release(id).await?;
                let meta_json = format!("{id}.json");
                let target_type = format!("{}\n", meta.target.object_type().api_name());
                let mut out = vec![(
                    b"meta.json".to_vec(),
                    VNode::link(relative_path(dir_path, &["archive", &meta_json]), mtime),
                )];
                let root = match meta.target.object_type() {
                    ObjectType::Directory => Some(meta.target),
                    ObjectType::Revision => Some(self.backend.revision(&meta.target).await?.tree),
                    _ => None,
                };
                if let Some(root) = root {
                    out.push((b"root".to_vec(), link_here(&root)));
                }
                out.push((b"target".to_vec(), link_here(&meta.target)));
                out.push((
                    b"target_type".to_vec(),
                    VNode::file(
                        Render::Text(target_type.clone().into_bytes()),
                        target_type.len() as u64,
                        mtime,
                    ),
                ));
                out
            }
            Render::Snapshot(id, prefix) => self.snapshot_children(dir_path, id, prefix).await?,
            Render::Origin(url) => {
                let visits = self.visits(url).await?;
                visit_names(&visits)
                    .into_iter()
                    .map(|(name, v)| {
                        let node = VNode::dir(Render::Visit(url.clone(), v.visit), 0).volatile();
                        (name.into_bytes(), node)
                    })
                    .collect()
            }
            Render::Visit(url, number) => {
                let visits = self.visits(url).await?;
                let visit = visits
                    .iter()
                    .find(|v| v.visit == *number)
                    .ok_or(FsError::NotFound)?;
                let meta = pretty_json(&visit.raw);
                let mut out = vec![(
                    b"meta.json".to_vec(),
                    VNode::file(Render::Text(meta.clone()), meta.len() as u64, 0).volatile(),
                )];
                if let Some(snp) = &visit.snapshot {
                    out.push((b"snapshot".to_vec(), link_here(snp).volatile()));
                }
                out
            }
            _ => return Err(FsError::NotADirectory),
        })
    }

    async fn archive_entry(self: &Arc<Self>, name: &[u8]) -> FsResult<VNode> {
        let name = name_str(name)?;
        if let Some(stem) = name.strip_suffix(".json") {
            let id = parse_swhid(stem).map_err(|_| FsError::NotFound)?;
            let doc = self.backend.metadata_doc(&id).await?;
            return Ok(VNode::file(Render::Metadata(id), doc.len() as u64, 0));
        }
        let id = parse_swhid(name).map_err(|_| FsError::NotFound)?;
        self.archive_node(&id).await
    }

    /// Node of `archive/<id>`.
    pub async fn archive_node(self: &Arc<Self>, id: &Swhid) -> FsResult<VNode> {
        Ok(match id.object_type() {
            ObjectType::Content => {
                let meta = self.backend.content(id).await?;
                VNode::file(Render::Content(*id), meta.length, 0)
            }
            ObjectType::Directory => {
                self.backend.directory_exists(id).await?;
                VNode::dir(Render::Directory(*id), 0)
            }
            ObjectType::Revision => {
                let meta = self.backend.revision(id).await?;
                VNode::dir(Render::Revision(*id), meta.committer_date.timestamp())
            }
            ObjectType::Release => {
                let meta = self.backend.release(id).await?;
                let mtime = meta.date.map_or(0, |d| d.timestamp());
                VNode::dir(Render::Release(*id), mtime)
            }
            ObjectType::Snapshot => {
                self.backend.snapshot(id).await?;
                VNode::dir(Render::Snapshot(*id, Vec::new()), 0)
            }
        })
    }

    /// Node for one entry of a source directory listed at `dir_path`.
    pub async fn entry_node(
        self: &Arc<Self>,
        dir_path: &[Name],
        entry: &DirEntry,
        mtime: i64,
    ) -> FsResult<VNode> {
        let length = || async {
            match entry.length {
                Some(n) => Ok(n),
                None => Ok::<_, FsError>(self.backend.content(&entry.target).await?.length),
            }
        };
        Ok(match entry.perm {
            EntryPerm::File => VNode::file(Render::Content(entry.target), length().await?, mtime),
            EntryPerm::ExecutableFile => {
                VNode::file(Render::Content(entry.target), length().await?, mtime).executable()
            }
            EntryPerm::Symlink => VNode {
                kind: NodeKind::Symlink,
                size: length().await?,
                perm: 0o444,
                mtime,
                volatile: false,
                render: Render::Content(entry.target),
            },
            EntryPerm::Subdirectory => VNode::dir(Render::Directory(entry.target), mtime),
            EntryPerm::SubmoduleRevision => VNode::link(archive_link(dir_path, &entry.target), mtime),
        })
    }

    async fn snapshot_children(
        self: &Arc<Self>,
        dir_path: &[Name],
        id: &Swhid,
        prefix: &[Name],
    ) -> FsResult<Vec<(Name, VNode)>> {
        let snap = self.backend.snapshot(id).await?;
        let split = |name: &[u8]| -> Option<Vec<Name>> {
            let parts: Vec<Name> = name.split(|b| *b == b'/').map(<[u8]>::to_vec).collect();
            parts.iter().all(|p| valid_component(p)).then_some(parts)
        };
        let mut dirs: BTreeSet<Name> = BTreeSet::new();
        let mut leaves: BTreeMap<Name, VNode> = BTreeMap::new();
        let mut place = |parts: Vec<Name>, leaf: &dyn Fn() -> VNode| {
            if parts.len() <= prefix.len() || !parts.starts_with(prefix) {
                return;
            }
            let next = parts[prefix.len()].clone();
            if parts.len() > prefix.len() + 1 {
                dirs.insert(next);
            } else {
                leaves.insert(next, leaf());
            }
        };
        for (name, target) in &snap.branches {
            if let Some(parts) = split(name) {
                place(parts, &|| VNode::link(archive_link(dir_path, target), 0));
            }
        }
        let snapshot_dir = ["archive".as_bytes().to_vec(), id.to_string().into_bytes()];
        for (name, target_name) in &snap.aliases {
            let (Some(parts), Some(target_parts)) = (split(name), split(target_name)) else {
                continue;
            };
            if snap.resolve_alias(name, DEFAULT_ALIAS_DEPTH).is_none() {
                continue;
            }
            let mut target_path = snapshot_dir.to_vec();
            target_path.extend(target_parts);
            place(parts, &|| VNode::link(relative_path(dir_path, &target_path), 0));
        }
        let mut out: Vec<(Name, VNode)> = dirs
            .iter()
            .map(|d| {
                let mut p = prefix.to_vec();
                p.push(d.clone());
                (d.clone(), VNode::dir(Render::Snapshot(*id, p), 0))
            })
            .collect();
        out.extend(leaves.into_iter().filter(|(n, _)| !dirs.contains(n)));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Target text of a symlink node.
    pub async fn readlink(self: &Arc<Self>, node: &VNode) -> FsResult<Vec<u8>> {
        match (&node.kind, &node.render) {
            (NodeKind::Symlink, Render::Link(target)) => Ok(target.clone()),
            (NodeKind::Symlink, Render::Content(id)) => self.backend.blob(id).await,
            _ => Err(FsError::Invalid("not a symlink".into())),
        }
    }

    /// Opens the bytes of a regular file.
    pub async fn contents(self: &Arc<Self>, node: &VNode) -> FsResult<FileContents> {
        let bytes = match &node.render {
            Render::Content(id) if node.kind == NodeKind::Regular => {
                return Ok(FileContents::Blob(self.backend.open_blob(id)?))
            }
            Render::Readme => README.as_bytes().to_vec(),
            Render::Metadata(id) => self.backend.metadata_doc(id).await?,
            Render::Text(b) => b.clone(),
            Render::DateStatus(rev) => self.views(rev).await?.status_line().into_bytes(),
            _ => return Err(FsError::Invalid("not a regular file".into())),
        };
        Ok(FileContents::Bytes(Arc::new(bytes)))
    }

    /// History views of `rev`, computing the ancestor list on first use.
    pub async fn views(self: &Arc<Self>, rev: &Swhid) -> FsResult<Arc<HistoryViews>> {
        if let Some(v) = self.histories.lock().unwrap().get(rev) {
            return Ok(v.clone());
        }
        let order = self.backend.history(rev).await?;
        let views = Arc::new(HistoryViews::new(order));
        Ok(self
            .histories
            .lock()
            .unwrap()
            .entry(*rev)
            .or_insert(views)
            .clone())
    }

    /// History views with calendar population under way.
    async fn dated_views(self: &Arc<Self>, rev: &Swhid) -> FsResult<Arc<HistoryViews>> {
        let views = self.views(rev).await?;
        views.start_population(&self.backend, self.options.date_concurrency);
        Ok(views)
    }

    async fn visits(&self, url: &str) -> FsResult<Arc<Vec<OriginVisit>>> {
        if let Some((at, v)) = self.visits.lock().unwrap().get(url) {
            if at.elapsed() < self.options.origin_ttl {
                return Ok(v.clone());
            }
        }
        let visits = Arc::new(self.backend.origin_visits(url).await?);
        self.visits
            .lock()
            .unwrap()
            .insert(url.to_owned(), (Instant::now(), visits.clone()));
        Ok(visits)
    }

    /// Starts an incremental listing of `dir`.
    pub fn open_dir(self: &Arc<Self>, dir_path: Vec<Name>, dir: VNode) -> DirCursor {
        DirCursor {
            layout: self.clone(),
            dir_path,
            dir,
            entries: Vec::new(),
            source: CursorSource::NotStarted,
        }
    }
}

enum CursorSource {
    NotStarted,
    Pages(DirPages),
    Done,
}

/// Directory listing materialized on demand. Source directories are read
/// page by page from the backend; other listings are computed at once.
pub struct DirCursor {
    layout: Arc<Layout>,
    dir_path: Vec<Name>,
    dir: VNode,
    entries: Vec<(Name, VNode)>,
    source: CursorSource,
}

impl DirCursor {
    pub fn dir_path(&self) -> &[Name] {
        &self.dir_path
    }

    /// Entries from position `index` on, fetching more from the backend only
    /// when none are buffered yet. An empty slice means the end.
    pub async fn entries_from(&mut self, index: usize) -> FsResult<&[(Name, VNode)]> {
        while index >= self.entries.len() && !matches!(self.source, CursorSource::Done) {
            self.fetch_more().await?;
        }
        Ok(&self.entries[index.min(self.entries.len())..])
    }

    async fn fetch_more(&mut self) -> FsResult<()> {
        match &mut self.source {
            CursorSource::NotStarted => match &self.dir.render {
                Render::Directory(id) => {
                    let pages = self.layout.backend.directory_pages(id)?;
                    self.source = CursorSource::Pages(pages);
                }
                _ => {
                    self.entries = self.layout.list(&self.dir_path, &self.dir).await?;
                    self.source = CursorSource::Done;
                }
            },
            CursorSource::Pages(pages) => match pages.next_page().await? {
                Some(page) => {
                    for e in page.iter().filter(|e| e.has_valid_name()) {
                        let node = self
                            .layout
                            .entry_node(&self.dir_path, e, self.dir.mtime)
                            .await?;
                        self.entries.push((e.name.clone(), node));
                    }
                }
                None => self.source = CursorSource::Done,
            },
            CursorSource::Done => {}
        }
        Ok(())
    }
}
