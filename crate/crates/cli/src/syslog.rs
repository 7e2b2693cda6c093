//! `log` backend writing to the system log through the C library.

use std::ffi::CString;

use log::{Level, LevelFilter, Log, Metadata, Record};

struct Syslog {
    level: LevelFilter,
}

fn priority(level: Level) -> libc::c_int {
    match level {
        Level::Error => libc::LOG_ERR,
        Level::Warn => libc::LOG_WARNING,
        Level::Info => libc::LOG_INFO,
        Level::Debug | Level::Trace => libc::LOG_DEBUG,
    }
}

impl Log for Syslog {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let text = format!("{}: {}", record.target(), record.args()).replace('\0', "\\0");
        let Ok(msg) = CString::new(text) else { return };
        // SAFETY: both strings are NUL-terminated and the format consumes
        // exactly one string argument.
        unsafe { libc::syslog(priority(record.level()), c"%s".as_ptr(), msg.as_ptr()) };
    }

    fn flush(&self) {}
}

/// Routes `log` records at or above `level` to the daemon facility of the
/// system log.
pub fn init(level: LevelFilter) -> Result<(), log::SetLoggerError> {
    // SAFETY: the identity string is static, as openlog requires.
    unsafe { libc::openlog(c"archivefs".as_ptr(), libc::LOG_PID, libc::LOG_DAEMON) };
    log::set_boxed_logger(Box::new(Syslog { level }))?;
    log::set_max_level(level);
    Ok(())
}
