//! Kernel-facing adapter: answers user-space filesystem requests from the
//! layout.
//!
//! Every request that may touch the network is served by a task on the
//! tokio runtime, so the kernel channel is never blocked on I/O and
//! independent requests proceed concurrently. Attributes of nodes that
//! cannot change are answered straight from the inode table.

pub mod inodes;

use std::collections::HashMap;
use std::ffi::OsStr;
use std::future::Future;
use std::os::unix::ffi::OsStrExt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use fuser::{
    Errno, FileAttr, FileHandle, FileType, Filesystem, FopenFlags, Generation, INodeNo,
    LockOwner, OpenAccMode, OpenFlags, RenameFlags, ReplyAttr, ReplyCreate, ReplyData,
    ReplyDirectory, ReplyEmpty, ReplyEntry, ReplyOpen, ReplyStatfs, ReplyWrite, Request,
    TimeOrNow, WriteFlags,
};
use log::debug;
use tokio::runtime::Handle;

use crate::backend::{FsError, FsResult};
use crate::layout::{DirCursor, FileContents, Layout, Name, NodeKind, Render, VNode};
use crate::swhid::parse_swhid;

pub use inodes::{InodeTable, ROOT_INO};

/// Attribute and entry lifetime granted to nodes that never change.
pub const STABLE_TTL: Duration = Duration::from_secs(365 * 24 * 3600);

fn errno(e: &FsError) -> Errno {
    Errno::from_i32(e.errno())
}

fn ttl(node: &VNode) -> Duration {
    if node.volatile {
        Duration::ZERO
    } else {
        STABLE_TTL
    }
}

fn file_type(kind: NodeKind) -> FileType {
    match kind {
        NodeKind::Regular => FileType::RegularFile,
        NodeKind::Directory => FileType::Directory,
        NodeKind::Symlink => FileType::Symlink,
    }
}

fn child_path(parent: &[Name], name: &[u8]) -> Vec<Name> {
    let mut path = parent.to_vec();
    path.push(name.to_vec());
    path
}

struct Handles {
    next: AtomicU64,
    files: Mutex<HashMap<u64, FileContents>>,
    dirs: Mutex<HashMap<u64, Arc<tokio::sync::Mutex<DirCursor>>>>,
}

impl Handles {
    fn allocate(&self) -> u64 {
        self.next.fetch_add(1, Ordering::Relaxed)
    }
}

struct Shared {
    layout: Arc<Layout>,
    inodes: InodeTable,
    handles: Handles,
    uid: u32,
    gid: u32,
}

impl Shared {
    fn attr(&self, ino: u64, node: &VNode) -> FileAttr {
        let mtime = if node.mtime >= 0 {
            UNIX_EPOCH + Duration::from_secs(node.mtime as u64)
        } else {
            UNIX_EPOCH - Duration::from_secs(node.mtime.unsigned_abs())
        };
        FileAttr {
            ino: INodeNo(ino),
            size: node.size,
            blocks: node.size.div_ceil(512),
            atime: mtime,
            mtime,
            ctime: mtime,
            crtime: mtime,
            kind: file_type(node.kind),
            perm: node.perm,
            nlink: if node.is_dir() { 2 } else { 1 },
            uid: self.uid,
            gid: self.gid,
            rdev: 0,
            blksize: 4096,
            flags: 0,
        }
    }

    /// Current node of `ino`. Nodes that may change are resolved again,
    /// starting from the deepest ancestor whose node is known to be stable.
    async fn node(&self, ino: u64) -> FsResult<(Vec<Name>, VNode)> {
        let (path, recorded) = self.inodes.get(ino).ok_or(FsError::NotFound)?;
        if let Some(node) = recorded.filter(|n| !n.volatile) {
            return Ok((path, node));
        }
        let node = self.refresh(&path).await?;
        Ok((path, node))
    }

    async fn refresh(&self, path: &[Name]) -> FsResult<VNode> {
        let mut depth = path.len();
        let mut node = loop {
            if depth == 0 {
                break crate::layout::root_node();
            }
            if let Some((_, node)) = self.inodes.stable(&path[..depth]) {
                break node;
            }
            depth -= 1;
        };
        for i in depth..path.len() {
            node = self.layout.lookup(&path[..i], &node, &path[i]).await?;
        }
        self.inodes.record(path, node.clone(), false);
        Ok(node)
    }

    async fn lookup(&self, parent: u64, name: &[u8]) -> FsResult<(u64, VNode)> {
        let (parent_path, parent_node) = self.node(parent).await?;
        let path = child_path(&parent_path, name);
        if let Some((_, node)) = self.inodes.stable(&path) {
            let ino = self.inodes.record(&path, node.clone(), true);
            return Ok((ino, node));
        }
        let node = self.layout.lookup(&parent_path, &parent_node, name).await?;
        let ino = self.inodes.record(&path, node.clone(), true);
        Ok((ino, node))
    }

    async fn open(&self, ino: u64) -> FsResult<(u64, FopenFlags)> {
        let (_, node) = self.node(ino).await?;
        let contents = self.layout.contents(&node).await?;
        let flags = match (&node.render, node.volatile) {
            (_, true) | (Render::DateStatus(_), _) => FopenFlags::FOPEN_DIRECT_IO,
            _ => FopenFlags::FOPEN_KEEP_CACHE,
        };
        let fh = self.handles.allocate();
        self.handles.files.lock().unwrap().insert(fh, contents);
        Ok((fh, flags))
    }

    async fn opendir(&self, ino: u64) -> FsResult<u64> {
        let (path, node) = self.node(ino).await?;
        if !node.is_dir() {
            return Err(FsError::NotADirectory);
        }
        let cursor = self.layout.open_dir(path, node);
        let fh = self.handles.allocate();
        self.handles
            .dirs
            .lock()
            .unwrap()
            .insert(fh, Arc::new(tokio::sync::Mutex::new(cursor)));
        Ok(fh)
    }

    /// Fills `reply` from position `offset` of the listing behind `fh`.
    /// Offsets 0 and 1 are `.` and `..`; entry `i` of the layout listing
    /// sits at offset `i + 2`.
    async fn readdir(&self, ino: u64, fh: u64, offset: u64, reply: &mut ReplyDirectory) -> FsResult<()> {
        let cursor = self
            .handles
            .dirs
            .lock()
            .unwrap()
            .get(&fh)
            .cloned()
            .ok_or(FsError::Invalid("unknown directory handle".into()))?;
        let mut cursor = cursor.lock().await;
        let dir_path = cursor.dir_path().to_vec();
        if offset == 0 && reply.add(INodeNo(ino), 1, FileType::Directory, ".") {
            return Ok(());
        }
        if offset <= 1 {
            let parent = match dir_path.split_last() {
                Some((_, up)) => self.inodes.ino_of(up).unwrap_or(ROOT_INO),
                None => ROOT_INO,
            };
            if reply.add(INodeNo(parent), 2, FileType::Directory, "..") {
                return Ok(());
            }
        }
        let start = offset.saturating_sub(2) as usize;
        let entries = cursor.entries_from(start).await?;
        for (i, (name, node)) in entries.iter().enumerate() {
            let child = self.inodes.record(&child_path(&dir_path, name), node.clone(), false);
            let next = (start + i + 3) as u64;
            if reply.add(INodeNo(child), next, file_type(node.kind), OsStr::from_bytes(name)) {
                break;
            }
        }
        Ok(())
    }

    async fn unlink(&self, parent: u64, name: &[u8]) -> FsResult<()> {
        let (parent_path, parent_node) = self.node(parent).await?;
        if !matches!(parent_node.render, Render::CacheShard(_)) {
            return Err(FsError::ReadOnly);
        }
        let key = std::str::from_utf8(name).map_err(|_| FsError::NotFound)?;
        let id = parse_swhid(key).map_err(|_| FsError::NotFound)?;
        let removed = self.layout.backend().caches().remove(&id.to_string())?;
        self.inodes.invalidate(&child_path(&parent_path, name));
        if removed == 0 {
            return Err(FsError::NotFound);
        }
        debug!("purged {id} from the cache");
        Ok(())
    }
}

/// The mounted filesystem. Requests are answered on the runtime behind
/// `handle`, which must outlive the mount.
pub struct ArchiveFs {
    shared: Arc<Shared>,
    runtime: Handle,
}

impl ArchiveFs {
    pub fn new(layout: Arc<Layout>, runtime: Handle) -> Self {
        // SAFETY: getuid and getgid cannot fail.
        let (uid, gid) = unsafe { (libc::getuid(), libc::getgid()) };
        ArchiveFs {
            shared: Arc::new(Shared {
                layout,
                inodes: InodeTable::new(),
                handles: Handles {
                    next: AtomicU64::new(1),
                    files: Mutex::new(HashMap::new()),
                    dirs: Mutex::new(HashMap::new()),
                },
                uid,
                gid,
            }),
            runtime,
        }
    }

    fn spawn<F, Fut>(&self, f: F)
    where
        F: FnOnce(Arc<Shared>) -> Fut,
        Fut: Future<Output = ()> + Send + 'static,
    {
        self.runtime.spawn(f(self.shared.clone()));
    }
}

impl Filesystem for ArchiveFs {
    fn lookup(&self, _req: &Request, parent: INodeNo, name: &OsStr, reply: ReplyEntry) {
        let name = name.as_bytes().to_vec();
        self.spawn(move |fs| async move {
            match fs.lookup(parent.0, &name).await {
                Ok((ino, node)) => reply.entry(&ttl(&node), &fs.attr(ino, &node), Generation(0)),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn forget(&self, _req: &Request, ino: INodeNo, nlookup: u64) {
        self.shared.inodes.forget(ino.0, nlookup);
    }

    fn getattr(&self, _req: &Request, ino: INodeNo, _fh: Option<FileHandle>, reply: ReplyAttr) {
        if let Some((_, Some(node))) = self.shared.inodes.get(ino.0) {
            if !node.volatile {
                reply.attr(&STABLE_TTL, &self.shared.attr(ino.0, &node));
                return;
            }
        }
        self.spawn(move |fs| async move {
            match fs.node(ino.0).await {
                Ok((_, node)) => reply.attr(&ttl(&node), &fs.attr(ino.0, &node)),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn readlink(&self, _req: &Request, ino: INodeNo, reply: ReplyData) {
        self.spawn(move |fs| async move {
            let target = match fs.node(ino.0).await {
                Ok((_, node)) => fs.layout.readlink(&node).await,
                Err(e) => Err(e),
            };
            match target {
                Ok(t) => reply.data(&t),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn open(&self, _req: &Request, ino: INodeNo, flags: OpenFlags, reply: ReplyOpen) {
        if flags.acc_mode() != OpenAccMode::O_RDONLY || flags.0 & libc::O_TRUNC != 0 {
            reply.error(Errno::EROFS);
            return;
        }
        self.spawn(move |fs| async move {
            match fs.open(ino.0).await {
                Ok((fh, flags)) => reply.opened(FileHandle(fh), flags),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn read(
        &self,
        _req: &Request,
        _ino: INodeNo,
        fh: FileHandle,
        offset: u64,
        size: u32,
        _flags: OpenFlags,
        _lock_owner: Option<LockOwner>,
        reply: ReplyData,
    ) {
        let contents = self.shared.handles.files.lock().unwrap().get(&fh.0).cloned();
        let Some(contents) = contents else {
            reply.error(Errno::EBADF);
            return;
        };
        self.runtime.spawn(async move {
            match contents.read(offset, size as usize).await {
                Ok(bytes) => reply.data(&bytes),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn release(
        &self,
        _req: &Request,
        _ino: INodeNo,
        fh: FileHandle,
        _flags: OpenFlags,
        _lock_owner: Option<LockOwner>,
        _flush: bool,
        reply: ReplyEmpty,
    ) {
        self.shared.handles.files.lock().unwrap().remove(&fh.0);
        reply.ok();
    }

    fn opendir(&self, _req: &Request, ino: INodeNo, _flags: OpenFlags, reply: ReplyOpen) {
        self.spawn(move |fs| async move {
            match fs.opendir(ino.0).await {
                Ok(fh) => reply.opened(FileHandle(fh), FopenFlags::empty()),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn readdir(&self, _req: &Request, ino: INodeNo, fh: FileHandle, offset: u64, reply: ReplyDirectory) {
        self.spawn(move |fs| async move {
            let mut reply = reply;
            match fs.readdir(ino.0, fh.0, offset, &mut reply).await {
                Ok(()) => reply.ok(),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn releasedir(
        &self,
        _req: &Request,
        _ino: INodeNo,
        fh: FileHandle,
        _flags: OpenFlags,
        reply: ReplyEmpty,
    ) {
        self.shared.handles.dirs.lock().unwrap().remove(&fh.0);
        reply.ok();
    }

    fn unlink(&self, _req: &Request, parent: INodeNo, name: &OsStr, reply: ReplyEmpty) {
        let name = name.as_bytes().to_vec();
        self.spawn(move |fs| async move {
            match fs.unlink(parent.0, &name).await {
                Ok(()) => reply.ok(),
                Err(e) => reply.error(errno(&e)),
            }
        });
    }

    fn statfs(&self, _req: &Request, _ino: INodeNo, reply: ReplyStatfs) {
        let files = self.shared.inodes.len() as u64;
        reply.statfs(0, 0, 0, files, 0, 4096, 255, 4096);
    }

    fn setattr(
        &self,
        _req: &Request,
        _ino: INodeNo,
        _mode: Option<u32>,
        _uid: Option<u32>,
        _gid: Option<u32>,
        _size: Option<u64>,
        _atime: Option<TimeOrNow>,
        _mtime: Option<TimeOrNow>,
        _ctime: Option<SystemTime>,
        _fh: Option<FileHandle>,
        _crtime: Option<SystemTime>,
        _chgtime: Option<SystemTime>,
        _bkuptime: Option<SystemTime>,
        _flags: Option<fuser::BsdFileFlags>,
        reply: ReplyAttr,
    ) {
        reply.error(Errno::EROFS);
    }

    fn mknod(
        &self,
        _req: &Request,
        _parent: INodeNo,
        _name: &OsStr,
        _mode: u32,
        _umask: u32,
        _rdev: u32,
        reply: ReplyEntry,
    ) {
        reply.error(Errno::EROFS);
    }

    fn mkdir(
        &self,
        _req: &Request,
        _parent: INodeNo,
        _name: &OsStr,
        _mode: u32,
        _umask: u32,
        reply: ReplyEntry,
    ) {
        reply.error(Errno::EROFS);
    }

    fn rmdir(&self, _req: &Request, _parent: INodeNo, _name: &OsStr, reply: ReplyEmpty) {
        reply.error(Errno::EROFS);
    }

    fn symlink(
        &self,
        _req: &Request,
        _parent: INodeNo,
        _link_name: &OsStr,
        _target: &std::path::Path,
        reply: ReplyEntry,
    ) {
        reply.error(Errno::EROFS);
    }

    fn rename(
        &self,
        _req: &Request,
        _parent: INodeNo,
        _name: &OsStr,
        _newparent: INodeNo,
        _newname: &OsStr,
        _flags: RenameFlags,
        reply: ReplyEmpty,
    ) {
        reply.error(Errno::EROFS);
    }

    fn link(
        &self,
        _req: &Request,
        _ino: INodeNo,
        _newparent: INodeNo,
        _newname: &OsStr,
        reply: ReplyEntry,
    ) {
        reply.error(Errno::EROFS);
    }

    fn write(
        &self,
        _req: &Request,
        _ino: INodeNo,
        _fh: FileHandle,
        _offset: u64,
        _data: &[u8],
        _write_flags: WriteFlags,
        _flags: OpenFlags,
        _lock_owner: Option<LockOwner>,
        reply: ReplyWrite,
    ) {
        reply.error(Errno::EROFS);
    }

    fn create(
        &self,
        _req: &Request,
        _parent: INodeNo,
        _name: &OsStr,
        _mode: u32,
        _umask: u32,
        _flags: i32,
        reply: ReplyCreate,
    ) {
        reply.error(Errno::EROFS);
    }
}
