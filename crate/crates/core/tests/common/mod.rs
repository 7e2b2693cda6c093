#![allow(dead_code)]

use std::collections::BTreeMap;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use archivefs::cache::CacheConfig;
use archivefs::client::ClientConfig;
use archivefs::layout::{Layout, LayoutOptions};
use archivefs::mount::{mount, MountConfig, MountError, MountedFs};
use archivefs::{open_layout, Swhid};
use archivefs_mock::{Fixture, Manifest, ManifestEntry, MockServer};
use tempfile::TempDir;

pub fn client_config(base_url: String) -> ClientConfig {
    ClientConfig {
        base_url,
        timeout: Duration::from_secs(20),
        connect_timeout: Duration::from_secs(2),
        retries: 1,
        backoff_base: Duration::from_millis(10),
        backoff_cap: Duration::from_millis(50),
        ..ClientConfig::default()
    }
}

/// A mock server over a fixture plus a layout reading from it through a
/// private cache directory.
pub struct Harness {
    pub fixture: Fixture,
    pub server: MockServer,
    pub cache_dir: TempDir,
    pub layout: Arc<Layout>,
}

impl Harness {
    pub fn new(fixture: Fixture) -> Self {
        Self::with_options(fixture, LayoutOptions::default())
    }

    pub fn with_options(fixture: Fixture, options: LayoutOptions) -> Self {
        let server = MockServer::start(fixture.archive.clone()).expect("mock server");
        let cache_dir = tempfile::tempdir().expect("cache dir");
        let layout = open_layout(
            client_config(server.base_url()),
            &CacheConfig::new(cache_dir.path()),
            options,
        )
        .expect("layout");
        Harness {
            fixture,
            server,
            cache_dir,
            layout,
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.fixture.manifest
    }

    /// Mounts the layout on a fresh directory, or returns `None` when this
    /// host cannot mount user-space filesystems.
    pub fn mount(&self) -> Option<Mounted> {
        let dir = tempfile::tempdir().expect("mount dir");
        match mount(dir.path(), self.layout.clone(), &MountConfig::default()) {
            Ok(fs) => Some(Mounted {
                fs: Some(fs),
                dir,
            }),
            Err(MountError::FuseUnavailable(why)) => {
                eprintln!("user-space filesystems unavailable: {why}");
                None
            }
            Err(e) => panic!("mount failed: {e}"),
        }
    }
}

pub struct Mounted {
    pub fs: Option<MountedFs>,
    pub dir: TempDir,
}

impl Mounted {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn archive(&self, id: &Swhid) -> PathBuf {
        self.root().join("archive").join(id.to_string())
    }
}

impl Drop for Mounted {
    fn drop(&mut self) {
        if let Some(fs) = self.fs.take() {
            fs.unmount().expect("unmount");
        }
    }
}

/// What a path looks like from user space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Seen {
    Dir,
    File { bytes: Vec<u8>, exec: bool },
    Link(Vec<u8>),
}

/// Every path below `root` (relative to it) with what it shows. Symlinks
/// are reported, not followed.
pub fn walk(root: &Path) -> BTreeMap<PathBuf, Seen> {
    let mut out = BTreeMap::new();
    let mut todo = vec![PathBuf::new()];
    while let Some(rel) = todo.pop() {
        for entry in std::fs::read_dir(root.join(&rel)).expect("read_dir") {
            let entry = entry.expect("dir entry");
            let child = rel.join(entry.file_name());
            let path = root.join(&child);
            let meta = std::fs::symlink_metadata(&path).expect("lstat");
            let seen = if meta.file_type().is_symlink() {
                Seen::Link(std::fs::read_link(&path).expect("readlink").as_os_str().as_bytes().to_vec())
            } else if meta.is_dir() {
                todo.push(child.clone());
                Seen::Dir
            } else {
                let bytes = std::fs::read(&path).expect("read");
                assert_eq!(bytes.len() as u64, meta.len(), "size of {}", path.display());
                Seen::File {
                    bytes,
                    exec: meta.permissions().mode() & 0o111 != 0,
                }
            };
            out.insert(child, seen);
        }
    }
    out
}

/// Expected contents of the source directory `dir` when shown at
/// `archive/<dir>`, computed from the manifest alone.
pub fn expected_tree(manifest: &Manifest, dir: &Swhid) -> BTreeMap<PathBuf, Seen> {
    fn fill(
        manifest: &Manifest,
        dir: &Swhid,
        rel: PathBuf,
        depth: usize,
        out: &mut BTreeMap<PathBuf, Seen>,
    ) {
        for (name, entry) in &manifest.directories[dir] {
            let child = rel.join(std::ffi::OsStr::from_bytes(name));
            let seen = match entry {
                ManifestEntry::File { content, exec, .. } => Seen::File {
                    bytes: manifest.blobs[content].clone(),
                    exec: *exec,
                },
                ManifestEntry::Symlink { target, .. } => Seen::Link(target.clone()),
                ManifestEntry::Dir(sub) => {
                    fill(manifest, sub, child.clone(), depth + 1, out);
                    Seen::Dir
                }
                // archive/<dir>/a/b links back up to archive/ and over to the commit
                ManifestEntry::Submodule(rev) => {
                    Seen::Link(format!("{}{rev}", "../".repeat(depth + 1)).into_bytes())
                }
            };
            out.insert(child, seen);
        }
    }
    let mut out = BTreeMap::new();
    fill(manifest, dir, PathBuf::new(), 0, &mut out);
    out
}
