//! Per-run plumbing: the output-directory lock and the timestamped run log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{LevelFilter, Log, Metadata, Record};

use crate::error::CliError;

pub const LOCK_FILE: &str = ".relmap.lock";
pub const RUN_LOG: &str = "run.log";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::usage(format!("cannot create output directory {}: {e}", out.display())))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::usage(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::usage(format!("cannot lock {}: {e}", out.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Buffers log lines with timestamps; warnings also go to stderr.
pub struct RunLogger {
    lines: Mutex<Vec<String>>,
}

static LOGGER: RunLogger = RunLogger {
    lines: Mutex::new(Vec::new()),
};

impl Log for RunLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::Level::Info || metadata.target().starts_with("relmap")
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let line = format!("{stamp} {:<5} {}", record.level(), record.args());
        if record.level() == log::Level::Warn {
            eprintln!("{}: {}", record.level().as_str().to_lowercase(), record.args());
        }
        self.lines.lock().unwrap_or_else(|e| e.into_inner()).push(line);
    }

    fn flush(&self) {}
}

pub fn init_logging() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(LevelFilter::Debug);
    }
}

/// Appends the buffered lines to `<out>/run.log` if the directory exists.
pub fn flush_run_log(out: &Path) {
    if !out.is_dir() {
        return;
    }
    let lines = std::mem::take(&mut *LOGGER.lines.lock().unwrap_or_else(|e| e.into_inner()));
    if lines.is_empty() {
        return;
    }
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(out.join(RUN_LOG)) {
        for l in lines {
            let _ = writeln!(f, "{l}");
        }
    }
}
