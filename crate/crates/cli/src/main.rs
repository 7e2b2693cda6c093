use std::ffi::OsString;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use archivefs::cache::{Caches, PurgeFilter};
use archivefs::client::ArchiveClient;
use archivefs::layout::{encode_origin, LayoutOptions};
use archivefs::mount::{check_mountpoint, is_mounted, mount, umount, MountConfig};
use archivefs::open_layout;
use archivefs_cli::{syslog, Config, Layer};
use chrono::{DateTime, NaiveDate, Utc};
use clap::{ArgGroup, Args, Parser, Subcommand};
use log::{info, LevelFilter};

/// How long `fs mount` waits for the background daemon to attach.
const DAEMON_START_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Parser)]
#[command(
    name = "archivefs",
    version,
    about = "Browse a software archive as a read-only filesystem"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Top,
}

#[derive(Args)]
struct GlobalArgs {
    /// Configuration file (default: ~/.config/archivefs/config).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root URL of the archive API.
    #[arg(long, global = true, value_name = "URL")]
    api_url: Option<String>,
    /// Directory holding the persistent caches.
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Bearer token sent with every API request.
    #[arg(long, global = true, value_name = "TOKEN")]
    auth_token: Option<String>,
    /// Extra attempts for failed requests.
    #[arg(long, global = true, value_name = "N")]
    retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long, global = true, value_name = "SECS")]
    timeout: Option<u64>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Top {
    /// Filesystem operations.
    #[command(subcommand)]
    Fs(FsCommand),
    /// Search archived origins by URL substrings.
    Search {
        /// Space-separated terms that must all occur in the URL.
        pattern: String,
        /// Maximum number of results.
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        limit: u64,
        /// Print each URL percent-encoded, ready for use under origin/.
        #[arg(long)]
        url_encode: bool,
    },
}

#[derive(Subcommand)]
enum FsCommand {
    /// Mount the archive on an empty directory.
    Mount {
        path: PathBuf,
        /// Stay attached to the terminal and log to it.
        #[arg(short, long)]
        foreground: bool,
        /// Directories kept in the in-memory entry cache.
        #[arg(long, value_name = "N")]
        direntry_capacity: Option<usize>,
        /// Largest blob, in bytes, kept in the persistent cache.
        #[arg(long, value_name = "BYTES")]
        blob_size_limit: Option<u64>,
        /// Let other users access the mounted tree.
        #[arg(long)]
        allow_other: bool,
        #[arg(long, hide = true)]
        daemon_child: bool,
    },
    /// Unmount a mounted archive.
    Umount { path: PathBuf },
    /// Remove records from the persistent caches.
    #[command(group(ArgGroup::new("what").required(true).args(["all", "before"])))]
    Clean {
        /// Remove everything.
        #[arg(long)]
        all: bool,
        /// Remove records cached before this instant (RFC 3339 or YYYY-MM-DD, UTC).
        #[arg(long, value_name = "WHEN", value_parser = parse_instant)]
        before: Option<DateTime<Utc>>,
    },
}

fn parse_instant(s: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
        .map_err(|_| format!("expected RFC 3339 or YYYY-MM-DD, got {s:?}"))
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn request_stop(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_stop_handlers() {
    for sig in [libc::SIGINT, libc::SIGTERM, libc::SIGHUP] {
        // SAFETY: the handler only stores to an atomic, which is
        // async-signal-safe.
        unsafe { libc::signal(sig, request_stop as *const () as libc::sighandler_t) };
    }
}

fn level(verbose: u8, base: LevelFilter) -> LevelFilter {
    match (base, verbose) {
        (b, 0) => b,
        (LevelFilter::Warn, 1) => LevelFilter::Info,
        (LevelFilter::Warn, 2) | (LevelFilter::Info, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    }
}

fn console_logging(level: LevelFilter) {
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .format_timestamp_millis()
        .init();
}

type CmdResult = Result<(), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Starts this program again as a session leader serving the mount, and
/// returns once the mount point is attached.
fn daemonize(path: &Path) -> CmdResult {
    let exe = std::env::current_exe().map_err(err)?;
    let mut args: Vec<OsString> = std::env::args_os().skip(1).collect();
    args.push("--daemon-child".into());
    let mut cmd = Command::new(exe);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    // SAFETY: setsid is async-signal-safe and touches no Rust state.
    unsafe {
        cmd.pre_exec(|| {
            if libc::setsid() < 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let mut child = cmd.spawn().map_err(|e| format!("cannot start daemon: {e}"))?;
    let started = Instant::now();
    loop {
        if is_mounted(path) {
            return Ok(());
        }
        if let Some(status) = child.try_wait().map_err(err)? {
            let mut diagnostic = String::new();
            if let Some(mut stderr) = child.stderr.take() {
                let _ = stderr.read_to_string(&mut diagnostic);
            }
            let diagnostic = diagnostic.trim();
            let diagnostic = diagnostic.strip_prefix("archivefs: ").unwrap_or(diagnostic);
            return Err(if diagnostic.is_empty() {
                format!("daemon exited with {status}")
            } else {
                diagnostic.to_owned()
            });
        }
        if started.elapsed() > DAEMON_START_TIMEOUT {
            let _ = child.kill();
            return Err("timed out waiting for the daemon to mount".into());
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Mounts and serves until unmounted or signalled.
fn serve(config: &Config, path: &Path, allow_other: bool, detached: bool) -> CmdResult {
    install_stop_handlers();
    let layout = open_layout(
        config.client_config(),
        &config.cache_config(),
        LayoutOptions::default(),
    )
    .map_err(err)?;
    let options = MountConfig {
        allow_other,
        ..MountConfig::default()
    };
    let fs = mount(path, layout, &options).map_err(err)?;
    if detached {
        // The parent waiting for the mount has read everything it needs.
        // SAFETY: plain descriptor manipulation on fds this process owns.
        unsafe {
            let null = libc::open(c"/dev/null".as_ptr(), libc::O_RDWR);
            if null >= 0 {
                libc::dup2(null, libc::STDERR_FILENO);
                libc::close(null);
            }
        }
    }
    info!("serving {} from {}", path.display(), config.api_base_url);
    loop {
        if STOP.load(Ordering::SeqCst) {
            info!("stopping on signal");
            return fs.unmount().map_err(err);
        }
        if !fs.is_serving() {
            info!("{} was unmounted", path.display());
            return fs.wait().map_err(err);
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn run(cli: Cli) -> CmdResult {
    let g = cli.global;
    let mut flags = Layer {
        api_base_url: g.api_url,
        auth_token: g.auth_token,
        cache_dir: g.cache_dir,
        retries: g.retries,
        timeout: g.timeout,
        ..Layer::default()
    };
    let daemon = matches!(
        cli.command,
        Top::Fs(FsCommand::Mount {
            daemon_child: true,
            ..
        })
    );
    if let Top::Fs(FsCommand::Mount {
        foreground,
        direntry_capacity,
        blob_size_limit,
        ..
    }) = &cli.command
    {
        flags.direntry_capacity = *direntry_capacity;
        flags.blob_size_limit = *blob_size_limit;
        if *foreground {
            flags.foreground = Some(true);
        }
    }
    let config = Config::load(flags, g.config.as_deref()).map_err(err)?;
    let foreground_mount = config.foreground && matches!(cli.command, Top::Fs(FsCommand::Mount { .. }));
    if daemon {
        syslog::init(level(g.verbose, LevelFilter::Info)).map_err(err)?;
    } else if foreground_mount {
        console_logging(level(g.verbose, LevelFilter::Info));
    } else {
        console_logging(level(g.verbose, LevelFilter::Warn));
    }

    match cli.command {
        Top::Fs(FsCommand::Mount {
            path,
            allow_other,
            daemon_child,
            ..
        }) => {
            if daemon_child || config.foreground {
                serve(&config, &path, allow_other, daemon_child)
            } else {
                check_mountpoint(&path).map_err(err)?;
                daemonize(&path)
            }
        }
        Top::Fs(FsCommand::Umount { path }) => umount(&path).map_err(err),
        Top::Fs(FsCommand::Clean { all, before }) => {
            let filter = match (all, before) {
                (true, _) => PurgeFilter::All,
                (false, Some(t)) => PurgeFilter::Before(t),
                (false, None) => unreachable!("clap requires --all or --before"),
            };
            let caches = Caches::open(&config.cache_config()).map_err(err)?;
            let n = caches.purge(filter).map_err(err)?;
            println!("removed {n} cache records");
            Ok(())
        }
        Top::Search {
            pattern,
            limit,
            url_encode,
        } => {
            let client = ArchiveClient::new(config.client_config()).map_err(err)?;
            let runtime = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(err)?;
            let urls = runtime
                .block_on(client.search_origins(&pattern, limit as usize))
                .map_err(err)?;
            for url in urls {
                if url_encode {
                    println!("{}", encode_origin(&url));
                } else {
                    println!("{url}");
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("archivefs: {msg}");
            ExitCode::from(1)
        }
    }
}
