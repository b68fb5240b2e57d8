//! Logger that appends one JSON object per record to `events.jsonl` and
//! prints a plain line to stderr.

use std::fs::{File, OpenOptions};
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{LevelFilter, Log, Metadata, Record};

pub fn events_path(out_dir: &Path) -> PathBuf {
    out_dir.join("events.jsonl")
}

struct EventLog {
    file: Option<Mutex<LineWriter<File>>>,
    stderr_level: LevelFilter,
}

impl Log for EventLog {
    fn enabled(&self, m: &Metadata) -> bool {
        m.target().starts_with("usps")
    }

    fn log(&self, r: &Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let msg = r.args().to_string();
        if r.level() <= self.stderr_level {
            eprintln!("[{}] {msg}", r.level().as_str().to_lowercase());
        }
        if let Some(file) = &self.file {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            let line = serde_json::json!({
                "ts": ts,
                "level": r.level().as_str(),
                "target": r.target(),
                "msg": msg,
            });
            if let Ok(mut f) = file.lock() {
                let _ = writeln!(f, "{line}");
            }
        }
    }

    fn flush(&self) {
        if let Some(file) = &self.file {
            if let Ok(mut f) = file.lock() {
                let _ = f.flush();
            }
        }
    }
}

/// Installs the logger. Without an output directory only stderr is used.
pub fn init(out_dir: Option<&Path>, stderr_level: LevelFilter) {
    let file = out_dir.and_then(|dir| {
        std::fs::create_dir_all(dir).ok()?;
        let f = OpenOptions::new().create(true).append(true).open(events_path(dir)).ok()?;
        Some(Mutex::new(LineWriter::new(f)))
    });
    let logger = EventLog { file, stderr_level };
    if log::set_boxed_logger(Box::new(logger)).is_ok() {
        log::set_max_level(LevelFilter::Debug);
    }
}
