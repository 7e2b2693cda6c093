//! Attaching the filesystem to a mount point and detaching it again.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fuser::{BackgroundSession, Config, MountOption, SessionACL};
use log::{info, warn};
use tokio::runtime::Runtime;

use crate::fuse::ArchiveFs;
use crate::layout::Layout;

#[derive(Debug, thiserror::Error)]
pub enum MountError {
    #[error("{0} is already a mount point")]
    MountpointBusy(PathBuf),
    #[error("{0} is not an empty directory")]
    NotEmpty(PathBuf),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("{0} is not mounted")]
    NotMounted(PathBuf),
    #[error("user-space filesystems are unavailable: {0}")]
    FuseUnavailable(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl MountError {
    fn io(path: &Path, source: io::Error) -> Self {
        MountError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MountConfig {
    /// Source name shown in the mount table.
    pub fsname: String,
    /// Let users other than the mounting one access the tree.
    pub allow_other: bool,
    /// Worker threads of the runtime answering requests.
    pub worker_threads: usize,
}

impl Default for MountConfig {
    fn default() -> Self {
        MountConfig {
            fsname: "archivefs".into(),
            allow_other: false,
            worker_threads: 4,
        }
    }
}

/// One line of the kernel's mount table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MountEntry {
    /// `major:minor` of the mounted filesystem.
    pub device: String,
    pub mount_point: PathBuf,
    pub fs_type: String,
    pub source: String,
}

/// Undoes the octal escapes (`\040` for a space and so on) of the mount table.
fn unescape_mount_field(field: &str) -> String {
    let bytes = field.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\'
            && i + 3 < bytes.len()
            && bytes[i + 1..i + 4].iter().all(|b| (b'0'..=b'7').contains(b))
        {
            let code = std::str::from_utf8(&bytes[i + 1..i + 4])
                .ok()
                .and_then(|s| u8::from_str_radix(s, 8).ok());
            if let Some(c) = code {
                out.push(c);
                i += 4;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Parses the `/proc/self/mountinfo` format.
pub fn parse_mountinfo(text: &str) -> Vec<MountEntry> {
    text.lines()
        .filter_map(|line| {
            let (left, right) = line.split_once(" - ")?;
            let mut left = left.split(' ');
            let device = left.nth(2)?;
            let mount_point = left.nth(1)?;
            let mut right = right.split(' ');
            let fs_type = right.next()?;
            let source = right.next().unwrap_or("");
            Some(MountEntry {
                device: device.to_owned(),
                mount_point: PathBuf::from(unescape_mount_field(mount_point)),
                fs_type: fs_type.to_owned(),
                source: unescape_mount_field(source),
            })
        })
        .collect()
}

/// The current mount table. The kernel only guarantees a consistent view
/// within one read call, so the file is read in a single call with a
/// buffer grown until it holds everything.
pub fn mount_table() -> io::Result<Vec<MountEntry>> {
    use std::io::Read;
    let mut size = 64 * 1024;
    loop {
        let mut buf = vec![0u8; size];
        let n = std::fs::File::open("/proc/self/mountinfo")?.read(&mut buf)?;
        if n < size {
            buf.truncate(n);
            return Ok(parse_mountinfo(&String::from_utf8_lossy(&buf)));
        }
        size *= 4;
    }
}

/// Absolute form of `path` without following a final component, which may
/// be a dead mount that cannot be stat-ed.
fn absolute(path: &Path) -> io::Result<PathBuf> {
    let abs = std::path::absolute(path)?;
    match (abs.parent(), abs.file_name()) {
        (Some(parent), Some(name)) => match parent.canonicalize() {
            Ok(p) => Ok(p.join(name)),
            Err(_) => Ok(abs),
        },
        _ => Ok(abs),
    }
}

/// Whether `path` is currently a mount point.
pub fn is_mounted(path: &Path) -> bool {
    let Ok(target) = absolute(path) else {
        return false;
    };
    mount_table()
        .map(|t| t.iter().any(|e| e.mount_point == target))
        .unwrap_or(false)
}

/// A live mount. Dropping it detaches the filesystem.
pub struct MountedFs {
    session: Option<BackgroundSession>,
    runtime: Option<Runtime>,
    mountpoint: PathBuf,
}

impl MountedFs {
    pub fn mountpoint(&self) -> &Path {
        &self.mountpoint
    }

    /// Whether the kernel connection is still being served.
    pub fn is_serving(&self) -> bool {
        self.session
            .as_ref()
            .is_some_and(|s| !s.guard.is_finished())
    }

    /// Detaches the filesystem and waits for the request loop to stop.
    pub fn unmount(mut self) -> Result<(), MountError> {
        let result = self.finish(true);
        info!("unmounted {}", self.mountpoint.display());
        result
    }

    /// Blocks until the filesystem is detached from elsewhere.
    pub fn wait(mut self) -> Result<(), MountError> {
        self.finish(false)
    }

    fn finish(&mut self, detach: bool) -> Result<(), MountError> {
        let Some(session) = self.session.take() else {
            return Ok(());
        };
        let result = if detach && !session.guard.is_finished() && is_mounted(&self.mountpoint) {
            session
                .umount_and_join()
                .map_err(|e| MountError::io(&self.mountpoint, e))
        } else {
            // Dropping the session after the kernel let go of it makes fuser
            // unmount by path, which would detach any newer mount on the
            // same directory. Join the request loop and leak the rest.
            let session = std::mem::ManuallyDrop::new(session);
            // SAFETY: the handle is read out once and the session it came
            // from is never used or dropped again.
            let guard = unsafe { std::ptr::read(&session.guard) };
            match guard.join() {
                Ok(Ok(())) => Ok(()),
                outcome => {
                    warn!("request loop for {} ended abnormally", self.mountpoint.display());
                    if let Ok(Err(e)) = outcome {
                        warn!("{e}");
                    }
                    if is_mounted(&self.mountpoint) {
                        lazy_unmount(&self.mountpoint)
                    } else {
                        Ok(())
                    }
                }
            }
        };
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
        result
    }
}

impl Drop for MountedFs {
    fn drop(&mut self) {
        if let Err(e) = self.finish(true) {
            warn!("unmounting {}: {e}", self.mountpoint.display());
        }
    }
}

fn lazy_unmount(path: &Path) -> Result<(), MountError> {
    let c_path = std::ffi::CString::new(path.as_os_str().as_encoded_bytes())
        .map_err(|e| MountError::io(path, io::Error::new(io::ErrorKind::InvalidInput, e)))?;
    // SAFETY: c_path is a valid NUL-terminated string.
    if unsafe { libc::umount2(c_path.as_ptr(), libc::MNT_DETACH) } == 0 {
        Ok(())
    } else {
        Err(MountError::io(path, io::Error::last_os_error()))
    }
}

/// Checks that `mountpoint` is an empty directory not already mounted on,
/// returning its absolute path.
pub fn check_mountpoint(mountpoint: &Path) -> Result<PathBuf, MountError> {
    let abs = absolute(mountpoint).map_err(|e| MountError::io(mountpoint, e))?;
    if is_mounted(&abs) {
        return Err(MountError::MountpointBusy(abs));
    }
    let meta = std::fs::metadata(&abs).map_err(|e| MountError::io(&abs, e))?;
    if !meta.is_dir() {
        return Err(MountError::NotADirectory(abs));
    }
    let mut entries = std::fs::read_dir(&abs).map_err(|e| MountError::io(&abs, e))?;
    if entries.next().is_some() {
        return Err(MountError::NotEmpty(abs));
    }
    Ok(abs)
}

/// Mounts `layout` at `mountpoint`, an existing empty directory, and serves
/// it from background threads until the returned handle is dropped or the
/// mount point is detached.
pub fn mount(
    mountpoint: &Path,
    layout: Arc<Layout>,
    config: &MountConfig,
) -> Result<MountedFs, MountError> {
    let abs = check_mountpoint(mountpoint)?;
    if !Path::new("/dev/fuse").exists() {
        return Err(MountError::FuseUnavailable("/dev/fuse does not exist".into()));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.worker_threads.max(1))
        .thread_name("archivefs-worker")
        .enable_all()
        .build()
        .map_err(|e| MountError::io(&abs, e))?;
    let fs = ArchiveFs::new(layout, runtime.handle().clone());
    let mut options = Config::default();
    // Not mounted with `ro`: the kernel would then refuse the unlink that
    // purges cache entries. Every other mutation is refused by the handlers.
    options.mount_options = vec![
        MountOption::NoDev,
        MountOption::NoSuid,
        MountOption::DefaultPermissions,
        MountOption::FSName(config.fsname.clone()),
        MountOption::Subtype("archivefs".into()),
    ];
    if config.allow_other {
        options.acl = SessionACL::All;
    }
    let session = fuser::spawn_mount(fs, &abs, &options).map_err(|e| {
        match e.raw_os_error() {
            Some(libc::ENODEV) | Some(libc::ENOENT) | Some(libc::EPERM) | Some(libc::EACCES) => {
                MountError::FuseUnavailable(e.to_string())
            }
            _ if e.kind() == io::ErrorKind::NotFound => MountError::FuseUnavailable(e.to_string()),
            _ => MountError::io(&abs, e),
        }
    })?;
    info!("mounted on {}", abs.display());
    Ok(MountedFs {
        session: Some(session),
        runtime: Some(runtime),
        mountpoint: abs,
    })
}

fn run_fusermount(mountpoint: &Path) -> io::Result<bool> {
    for bin in ["fusermount3", "fusermount"] {
        match std::process::Command::new(bin)
            .arg("-u")
            .arg(mountpoint)
            .status()
        {
            Ok(status) => return Ok(status.success()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(false)
}

/// Detaches the filesystem mounted at `mountpoint`, whichever process
/// serves it.
pub fn umount(mountpoint: &Path) -> Result<(), MountError> {
    let abs = absolute(mountpoint).map_err(|e| MountError::io(mountpoint, e))?;
    if !is_mounted(&abs) {
        return Err(MountError::NotMounted(abs));
    }
    let c_path = std::ffi::CString::new(abs.as_os_str().as_encoded_bytes())
        .map_err(|e| MountError::io(&abs, io::Error::new(io::ErrorKind::InvalidInput, e)))?;
    // SAFETY: c_path is a valid NUL-terminated string.
    let rc = unsafe { libc::umount2(c_path.as_ptr(), 0) };
    if rc == 0 {
        return Ok(());
    }
    let err = io::Error::last_os_error();
    if matches!(err.raw_os_error(), Some(libc::EPERM) | Some(libc::EACCES))
        && run_fusermount(&abs).map_err(|e| MountError::io(&abs, e))?
    {
        return Ok(());
    }
    Err(MountError::io(&abs, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mountinfo_lines() {
        let text = "\
36 35 98:0 /mnt1 /mnt/with\\040space rw,noatime master:1 - ext3 /dev/root rw,errors=continue
40 36 0:45 / /tmp/m rw,nosuid,nodev shared:5 - fuse.archivefs archivefs ro,user_id=0
";
        let t = parse_mountinfo(text);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].mount_point, PathBuf::from("/mnt/with space"));
        assert_eq!(t[0].fs_type, "ext3");
        assert_eq!(t[0].device, "98:0");
        assert_eq!(t[1].device, "0:45");
        assert_eq!(t[1].mount_point, PathBuf::from("/tmp/m"));
        assert_eq!(t[1].fs_type, "fuse.archivefs");
        assert_eq!(t[1].source, "archivefs");
    }

    #[test]
    fn escapes() {
        assert_eq!(unescape_mount_field("a\\011b\\134c"), "a\tb\\c");
        assert_eq!(unescape_mount_field("trailing\\04"), "trailing\\04");
    }

    #[test]
    fn mountpoint_checks() {
        let dir = tempfile::tempdir().unwrap();
        assert!(check_mountpoint(dir.path()).is_ok());
        std::fs::write(dir.path().join("f"), b"x").unwrap();
        assert!(matches!(
            check_mountpoint(dir.path()),
            Err(MountError::NotEmpty(_))
        ));
        assert!(matches!(
            check_mountpoint(&dir.path().join("f")),
            Err(MountError::NotADirectory(_))
        ));
        assert!(matches!(
            umount(dir.path()),
            Err(MountError::NotMounted(_))
        ));
        assert!(!is_mounted(dir.path()));
        assert!(is_mounted(Path::new("/proc")));
    }
}
