//! The job wrapper that runs on the worker node.
//!
//! [`run_wrapped`] starts the real job, copies its stdout and stderr to the
//! files named in the job description, parses progress lines out of stdout
//! and pushes them to the ATM server every `retry` period. It only dials
//! out to the ATM server and never listens.

mod progress;
mod spool;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Read, Write};
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::client::{AtmClient, ClientError, Dialer, TcpDialer};
use crate::jdl::{JdlDocument, JdlValue, Violation, WrappedArguments};
use crate::model::{EventKind, EventReport};

pub use progress::{
    estimate_buffer_fill, parse_progress_line, poll_indirect_size, BufferFill, DomainError,
    PatternError, ProgressPatterns, SizePoller, SizeWatcher, DEFAULT_PROGRESS_PATTERN,
};

/// Environment variable that overrides where the spool file goes.
pub const SPOOL_DIR_ENV: &str = "ATM_SPOOL_DIR";

/// Everything the wrapper needs to know about one job.
#[derive(Clone, PartialEq, Eq)]
pub struct WrapperArgs {
    pub job_id: String,
    pub password: String,
    pub site: String,
    pub atm_url: String,
    pub command: String,
    pub command_args: Vec<String>,
    /// Push period.
    pub retry: Duration,
    pub stdout_path: Option<PathBuf>,
    pub stderr_path: Option<PathBuf>,
    /// File whose size is reported as an indirect progress metric.
    pub watch_path: Option<PathBuf>,
}

impl std::fmt::Debug for WrapperArgs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WrapperArgs")
            .field("job_id", &self.job_id)
            .field("password", &"<redacted>")
            .field("site", &self.site)
            .field("atm_url", &self.atm_url)
            .field("command", &self.command)
            .field("command_args", &self.command_args)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArgsError {
    #[error("missing -{0}=")]
    Missing(&'static str),
    #[error("unknown flag {0:?}")]
    UnknownFlag(String),
    #[error("invalid value for -{flag}: {value:?}")]
    BadValue { flag: &'static str, value: String },
    #[error("no command given")]
    NoCommand,
    #[error("job description is not wrapped: {0}")]
    Jdl(String),
}

fn parse_seconds(flag: &'static str, value: &str) -> Result<Duration, ArgsError> {
    value
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s > 0.0)
        .and_then(|s| Duration::try_from_secs_f64(s).ok())
        .ok_or(ArgsError::BadValue {
            flag,
            value: value.to_string(),
        })
}

impl WrapperArgs {
    /// Parses `-id=.. -password=.. -site=.. -atm=.. [-retry=..] [-stdout=..]
    /// [-stderr=..] [-watch=..] [--] command args..`.
    ///
    /// Without `--`, the first token that is not a known flag starts the
    /// command, which is also how a JDL `Arguments` run reads.
    pub fn from_cli_args<S: AsRef<str>>(args: &[S]) -> Result<Self, ArgsError> {
        let mut job_id = None;
        let mut password = None;
        let mut site = None;
        let mut atm_url = None;
        let mut retry = Duration::from_secs(crate::jdl::DEFAULT_RETRY_COUNT.into());
        let mut stdout_path = None;
        let mut stderr_path = None;
        let mut watch_path = None;
        let mut rest = args.iter().map(AsRef::as_ref);
        let mut command = Vec::new();
        for arg in rest.by_ref() {
            if arg == "--" {
                break;
            }
            let Some((flag, value)) = arg.strip_prefix('-').and_then(|a| a.split_once('=')) else {
                if arg.starts_with('-') {
                    return Err(ArgsError::UnknownFlag(arg.to_string()));
                }
                command.push(arg.to_string());
                break;
            };
            match flag {
                "id" => job_id = Some(value.to_string()),
                "password" => password = Some(value.to_string()),
                "site" => site = Some(value.to_string()),
                "atm" => atm_url = Some(value.to_string()),
                "retry" => retry = parse_seconds("retry", value)?,
                "stdout" => stdout_path = Some(PathBuf::from(value)),
                "stderr" => stderr_path = Some(PathBuf::from(value)),
                "watch" => watch_path = Some(PathBuf::from(value)),
                _ => return Err(ArgsError::UnknownFlag(arg.to_string())),
            }
        }
        command.extend(rest.map(str::to_string));
        let mut command = command.into_iter();
        let program = command.next().ok_or(ArgsError::NoCommand)?;
        let nonempty = |v: Option<String>, flag| v.filter(|s| !s.is_empty()).ok_or(ArgsError::Missing(flag));
        Ok(Self {
            job_id: nonempty(job_id, "id")?,
            password: nonempty(password, "password")?,
            site: nonempty(site, "site")?,
            atm_url: nonempty(atm_url, "atm")?,
            command: program,
            command_args: command.collect(),
            retry,
            stdout_path,
            stderr_path,
            watch_path,
        })
    }

    /// The canonical `--` form accepted by [`WrapperArgs::from_cli_args`].
    pub fn to_cli_args(&self) -> Vec<OsString> {
        let mut out: Vec<OsString> = vec![
            format!("-id={}", self.job_id).into(),
            format!("-password={}", self.password).into(),
            format!("-site={}", self.site).into(),
            format!("-atm={}", self.atm_url).into(),
            format!("-retry={}", self.retry.as_secs_f64()).into(),
        ];
        for (flag, path) in [
            ("stdout", &self.stdout_path),
            ("stderr", &self.stderr_path),
            ("watch", &self.watch_path),
        ] {
            if let Some(path) = path {
                let mut arg = OsString::from(format!("-{flag}="));
                arg.push(path);
                out.push(arg);
            }
        }
        out.push("--".into());
        out.push(self.command.clone().into());
        out.extend(self.command_args.iter().map(OsString::from));
        out
    }

    /// Reads a rewritten job description: ticket flags and command from
    /// `Arguments`, the period from `RetryCount`, output files from
    /// `StdOutput`/`StdError`.
    pub fn from_jdl(doc: &JdlDocument) -> Result<Self, ArgsError> {
        let describe = |v: Vec<Violation>| {
            ArgsError::Jdl(
                v.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        };
        let wrapped = WrappedArguments::from_document(doc).map_err(describe)?;
        let atm_url = wrapped.atm_url.ok_or(ArgsError::Missing("atm"))?;
        let retry = match doc.get("RetryCount") {
            Some(JdlValue::Number(n)) if *n >= 1 => Duration::from_secs(*n as u64),
            Some(other) => {
                return Err(ArgsError::BadValue {
                    flag: "retry",
                    value: other.to_string(),
                })
            }
            None => return Err(describe(vec![Violation::RetryCountMissing])),
        };
        let path_of = |name| doc.get(name).and_then(JdlValue::as_str).map(PathBuf::from);
        Ok(Self {
            job_id: wrapped.job_id,
            password: wrapped.password,
            site: wrapped.site,
            atm_url,
            command: wrapped.executable,
            command_args: wrapped.args,
            retry,
            stdout_path: path_of("StdOutput"),
            stderr_path: path_of("StdError"),
            watch_path: None,
        })
    }
}

/// Knobs that are not part of the job description.
#[derive(Clone)]
pub struct WrapperOptions {
    pub patterns: ProgressPatterns,
    pub dialer: Arc<dyn Dialer>,
    /// Where undelivered events are spooled.
    pub spool_dir: PathBuf,
    /// How long to keep retrying delivery after the child has exited.
    pub final_flush_timeout: Duration,
    /// Per-request timeout towards the ATM server.
    pub request_timeout: Duration,
    /// Directory the child runs in (inherited when `None`).
    pub working_dir: Option<PathBuf>,
}

impl Default for WrapperOptions {
    fn default() -> Self {
        Self {
            patterns: ProgressPatterns::default(),
            dialer: Arc::new(TcpDialer),
            spool_dir: std::env::var_os(SPOOL_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
            final_flush_timeout: Duration::from_secs(60),
            request_timeout: Duration::from_secs(5),
            working_dir: None,
        }
    }
}

impl std::fmt::Debug for WrapperOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WrapperOptions")
            .field("spool_dir", &self.spool_dir)
            .field("final_flush_timeout", &self.final_flush_timeout)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("cannot start {command}: {source}")]
    SpawnFailed {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// What happened during one wrapped run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrapperOutcome {
    /// The child's exit code, or 128 + signal number.
    pub exit_code: i32,
    pub delivered_events: u64,
    /// Events still in the spool when the wrapper gave up.
    pub undelivered_events: usize,
}

/// Exit code the shell would report for `status`.
pub fn exit_code_of(status: ExitStatus) -> i32 {
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(1)
}

fn open_sink(path: Option<&Path>, base: Option<&Path>) -> io::Result<Option<File>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let full = match base {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.to_path_buf(),
            };
            File::create(full).map(Some)
        }
    }
}

/// Copies `reader` to `sink` (or the wrapper's own stream) chunk by chunk,
/// forwarding complete lines to `lines` when given.
fn pump<R: Read>(
    mut reader: R,
    mut sink: Box<dyn Write + Send>,
    lines: Option<mpsc::Sender<String>>,
) -> io::Result<()> {
    let mut buf = [0u8; 8192];
    let mut partial: Vec<u8> = Vec::new();
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        sink.write_all(&buf[..n])?;
        sink.flush()?;
        if let Some(tx) = &lines {
            partial.extend_from_slice(&buf[..n]);
            while let Some(pos) = partial.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = partial.drain(..=pos).collect();
                let text = String::from_utf8_lossy(&line[..line.len() - 1]);
                let _ = tx.send(text.trim_end_matches('\r').to_string());
            }
        }
    }
    if let Some(tx) = &lines {
        if !partial.is_empty() {
            let _ = tx.send(String::from_utf8_lossy(&partial).into_owned());
        }
    }
    Ok(())
}

fn progress_event(line: String, patterns: &ProgressPatterns) -> Option<EventReport> {
    parse_progress_line(&line, patterns).map(|(d, t)| EventReport::progress(d, t, Some(line)))
}

/// Runs the job under monitoring and returns once it has exited and its
/// final events were delivered (or `final_flush_timeout` ran out).
///
/// Delivery problems never affect the child: undelivered events stay in
/// the spool and are retried every cycle.
pub fn run_wrapped(args: &WrapperArgs, options: &WrapperOptions) -> Result<WrapperOutcome, AgentError> {
    let client = AtmClient::new(&args.atm_url)?
        .with_dialer(options.dialer.clone())
        .with_timeout(options.request_timeout);
    let mut pusher = spool::Pusher::new(client, &args.job_id, &args.password, &options.spool_dir);

    let base = options.working_dir.as_deref();
    let stdout_sink = open_sink(args.stdout_path.as_deref(), base)?;
    let stderr_sink = open_sink(args.stderr_path.as_deref(), base)?;

    let mut command = Command::new(&args.command);
    command
        .args(&args.command_args)
        .stdin(Stdio::inherit())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = base {
        command.current_dir(dir);
    }
    let mut child = match command.spawn() {
        Ok(child) => child,
        Err(source) => {
            pusher.enqueue(EventReport::failed(
                None,
                Some(format!("cannot start {}: {source}", args.command)),
            ));
            pusher.drain(options.final_flush_timeout.min(Duration::from_secs(5)), args.retry);
            return Err(AgentError::SpawnFailed {
                command: args.command.clone(),
                source,
            });
        }
    };
    pusher.enqueue(EventReport::new(EventKind::Started));
    pusher.flush();

    let (tx, rx) = mpsc::channel();
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let out_sink: Box<dyn Write + Send> = match stdout_sink {
        Some(f) => Box::new(f),
        None => Box::new(io::stdout()),
    };
    let err_sink: Box<dyn Write + Send> = match stderr_sink {
        Some(f) => Box::new(f),
        None => Box::new(io::stderr()),
    };
    let out_thread = thread::spawn(move || pump(stdout, out_sink, Some(tx)));
    let err_thread = thread::spawn(move || pump(stderr, err_sink, None));

    let mut watcher = args
        .watch_path
        .as_ref()
        .map(|p| SizeWatcher::new(base.map_or_else(|| p.clone(), |b| b.join(p))));
    let mut batch: Vec<EventReport> = Vec::new();
    let mut next_push = Instant::now() + args.retry;
    let mut stdout_open = true;
    let status = loop {
        if Instant::now() >= next_push {
            if let Some(size) = watcher.as_mut().and_then(SizeWatcher::poll) {
                batch.push(EventReport::indirect_size(size));
            }
            if batch.is_empty() {
                batch.push(EventReport::new(EventKind::Heartbeat));
            }
            for event in batch.drain(..) {
                pusher.enqueue(event);
            }
            pusher.flush();
            next_push = Instant::now() + args.retry;
        }
        let wait = next_push.saturating_duration_since(Instant::now());
        if stdout_open {
            match rx.recv_timeout(wait) {
                Ok(line) => batch.extend(progress_event(line, &options.patterns)),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => stdout_open = false,
            }
        } else {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            thread::sleep(wait.min(Duration::from_millis(10)));
        }
    };

    for handle in [out_thread, err_thread] {
        match handle.join() {
            Ok(Err(e)) => log::warn!("output copy failed: {e}"),
            Err(_) => log::warn!("output copy thread panicked"),
            Ok(Ok(())) => {}
        }
    }
    // Residual lines first, then the terminal event.
    batch.extend(rx.try_iter().filter_map(|l| progress_event(l, &options.patterns)));
    if let Some(size) = watcher.as_mut().and_then(SizeWatcher::poll) {
        batch.push(EventReport::indirect_size(size));
    }
    for event in batch.drain(..) {
        pusher.enqueue(event);
    }
    let exit_code = exit_code_of(status);
    if status.code().is_some() {
        pusher.enqueue(EventReport::finished(exit_code));
    } else {
        pusher.enqueue(EventReport::failed(
            Some(exit_code),
            Some(format!("terminated by signal {}", exit_code - 128)),
        ));
    }
    pusher.drain(options.final_flush_timeout, args.retry.min(Duration::from_secs(1)));

    Ok(WrapperOutcome {
        exit_code,
        delivered_events: pusher.delivered(),
        undelivered_events: pusher.pending(),
    })
}
