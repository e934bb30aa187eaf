use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use regex::Regex;
use thiserror::Error;

/// Matches `completed 20 from 200 events`.
pub const DEFAULT_PROGRESS_PATTERN: &str =
    r"completed\s+(?P<done>\d+)\s+from\s+(?P<total>\d+)\s+events";

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("invalid progress pattern {pattern:?}: {source}")]
    Regex {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("progress pattern {0:?} needs named groups `done` and `total`")]
    MissingGroups(String),
}

/// Ordered progress templates; the first one that matches a line wins.
#[derive(Debug, Clone)]
pub struct ProgressPatterns {
    patterns: Vec<Regex>,
}

impl Default for ProgressPatterns {
    fn default() -> Self {
        Self::new([DEFAULT_PROGRESS_PATTERN]).expect("default pattern is valid")
    }
}

impl ProgressPatterns {
    pub fn new<I, S>(patterns: I) -> Result<Self, PatternError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let patterns = patterns
            .into_iter()
            .map(|p| {
                let p = p.as_ref();
                let re = Regex::new(p).map_err(|source| PatternError::Regex {
                    pattern: p.to_string(),
                    source,
                })?;
                let names: Vec<_> = re.capture_names().flatten().collect();
                if !names.contains(&"done") || !names.contains(&"total") {
                    return Err(PatternError::MissingGroups(p.to_string()));
                }
                Ok(re)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }
}

/// Extracts `(done, total)` from a line of job output.
///
/// Lines that match no template, carry numbers that do not fit in a u64,
/// or report `done > total` yield `None`. The first matching template
/// decides; later templates are not consulted.
pub fn parse_progress_line(line: &str, patterns: &ProgressPatterns) -> Option<(u64, u64)> {
    let caps = patterns.patterns.iter().find_map(|re| re.captures(line))?;
    let done: u64 = caps.name("done")?.as_str().parse().ok()?;
    let total: u64 = caps.name("total")?.as_str().parse().ok()?;
    (done <= total).then_some((done, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("buffer estimate needs positive inputs")]
pub struct DomainError;

/// How long a fully buffered child takes to fill its stdout buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferFill {
    /// Lines written before the first flush.
    pub lines_to_fill: u64,
    /// Time until the first byte reaches the monitor.
    pub delay: Duration,
}

/// `lines = floor(buffer / line)`, `delay = lines * interval`.
pub fn estimate_buffer_fill(
    buffer_bytes: u64,
    line_bytes: u64,
    line_interval: Duration,
) -> Result<BufferFill, DomainError> {
    if buffer_bytes == 0 || line_bytes == 0 || line_interval.is_zero() {
        return Err(DomainError);
    }
    let lines_to_fill = buffer_bytes / line_bytes;
    let delay = u32::try_from(lines_to_fill)
        .ok()
        .and_then(|n| line_interval.checked_mul(n))
        .ok_or(DomainError)?;
    Ok(BufferFill {
        lines_to_fill,
        delay,
    })
}

/// Tracks the size of a file that may not exist yet.
#[derive(Debug, Clone)]
pub struct SizeWatcher {
    path: PathBuf,
    last: u64,
}

impl SizeWatcher {
    /// Starts from a baseline of 0 bytes.
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            last: 0,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Returns the new size when it differs from the previous observation.
    pub fn poll(&mut self) -> Option<u64> {
        let size = fs::metadata(&self.path).map(|m| m.len()).unwrap_or(0);
        if size == self.last {
            return None;
        }
        self.last = size;
        Some(size)
    }
}

/// A background [`SizeWatcher`] polling every `period`.
pub struct SizePoller {
    pub sizes: Receiver<u64>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SizePoller {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SizePoller {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Emits the size of `path` whenever it changes between polls.
pub fn poll_indirect_size(path: impl Into<PathBuf>, period: Duration) -> SizePoller {
    let mut watcher = SizeWatcher::new(path);
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let flag = stop.clone();
    let thread = std::thread::spawn(move || {
        while !flag.load(Ordering::Relaxed) {
            if let Some(size) = watcher.poll() {
                if tx.send(size).is_err() {
                    return;
                }
            }
            std::thread::sleep(period);
        }
    });
    SizePoller {
        sizes: rx,
        stop,
        thread: Some(thread),
    }
}
