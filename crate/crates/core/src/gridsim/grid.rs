use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{exit_code_of, ArgsError, WrapperArgs, SPOOL_DIR_ENV};
use crate::jdl::{parse_jdl, validate_monitoring_jdl, JdlError, JdlValue, Violation, WRAPPER_EXECUTABLE};

use super::audit::{AUDIT_FILE_ENV, AUDIT_ROLE_ENV};

/// Site value that lets the broker pick any computing element.
pub const ANY_SITE: &str = "*";

/// File next to the WN work directory that receives the wrapper's own stdout.
pub const WN_STDOUT: &str = ".wn-stdout";
pub const WN_STDERR: &str = ".wn-stderr";

/// How a worker node starts the wrapper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrapperCommand {
    pub program: PathBuf,
    /// Arguments placed before the wrapper flags, e.g. a subcommand.
    pub prefix_args: Vec<OsString>,
}

impl WrapperCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            prefix_args: Vec::new(),
        }
    }

    pub fn with_prefix<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<OsString>,
    {
        self.prefix_args = args.into_iter().map(Into::into).collect();
        self
    }

    /// The running executable invoked as `<exe> wrapper ...`.
    pub fn current_exe() -> io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?).with_prefix(["wrapper"]))
    }
}

/// A computing element and how many jobs it runs at once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CeNode {
    pub site: String,
    pub slots: usize,
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("job description does not parse: {0}")]
    Parse(#[from] JdlError),
    #[error("job description is not wrapped for monitoring: {}", join(.0))]
    ValidationFailed(Vec<Violation>),
    #[error("wrapper arguments: {0}")]
    WrapperArgs(#[from] ArgsError),
    #[error("no computing element serves site {0:?}")]
    UnknownSite(String),
    #[error("input sandbox file {0:?} not found")]
    MissingSandboxFile(String),
    #[error("the grid is shut down")]
    ShutDown,
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One WN lifetime, in microseconds since the grid started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub job_index: usize,
    pub site: String,
    pub slot: usize,
    pub start_us: u64,
    pub end_us: u64,
}

/// Largest number of simultaneously alive WN processes in `trace`,
/// optionally restricted to one site. Touching intervals do not overlap.
pub fn max_concurrency(trace: &[ScheduleEntry], site: Option<&str>) -> usize {
    let mut points: Vec<(u64, i32)> = trace
        .iter()
        .filter(|e| site.is_none_or(|s| e.site == s))
        .flat_map(|e| [(e.start_us, 1), (e.end_us, -1)])
        .collect();
    // Ends sort before starts at the same instant.
    points.sort();
    let mut alive = 0i32;
    let mut max = 0i32;
    for (_, delta) in points {
        alive += delta;
        max = max.max(alive);
    }
    max as usize
}

/// What a worker node reports back when its wrapper exits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WnResult {
    pub index: usize,
    pub job_id: String,
    pub site: String,
    /// Exit code of the wrapper process (which mirrors the job's).
    pub exit_code: Option<i32>,
    pub work_dir: PathBuf,
    /// Path of the job's stdout as the wrapper wrote it.
    pub stdout_path: PathBuf,
    pub error: Option<String>,
}

pub struct SimJobHandle {
    pub index: usize,
    pub job_id: String,
    result: Receiver<WnResult>,
}

impl SimJobHandle {
    pub fn wait_timeout(&self, timeout: Duration) -> Option<WnResult> {
        self.result.recv_timeout(timeout).ok()
    }
}

struct Task {
    index: usize,
    args: WrapperArgs,
    requested_site: String,
    sandbox: Vec<PathBuf>,
    reply: Sender<WnResult>,
}

struct Shared {
    start: Instant,
    trace: Mutex<Vec<ScheduleEntry>>,
    abort: AtomicBool,
    wrapper: WrapperCommand,
    work_dir: PathBuf,
    audit_file: PathBuf,
    credentials: Mutex<Vec<(String, String)>>,
}

/// A resource broker in front of a set of computing elements whose worker
/// nodes are local subprocesses.
pub struct Grid {
    shared: Arc<Shared>,
    rb_tx: Option<Sender<Task>>,
    threads: Vec<JoinHandle<()>>,
    sites: Vec<String>,
    next_index: AtomicUsize,
}

impl Grid {
    /// Starts the broker and one thread per CE slot. WN work directories
    /// go under `work_dir`; WN connects are appended to `audit_file`.
    pub fn start(
        ce_nodes: &[CeNode],
        wrapper: WrapperCommand,
        work_dir: &Path,
        audit_file: &Path,
    ) -> io::Result<Self> {
        fs::create_dir_all(work_dir)?;
        let shared = Arc::new(Shared {
            start: Instant::now(),
            trace: Mutex::new(Vec::new()),
            abort: AtomicBool::new(false),
            wrapper,
            work_dir: work_dir.to_path_buf(),
            audit_file: audit_file.to_path_buf(),
            credentials: Mutex::new(Vec::new()),
        });
        let mut threads = Vec::new();
        let mut ce_queues: Vec<(String, Sender<Task>)> = Vec::new();
        for ce in ce_nodes {
            let (tx, rx) = mpsc::channel::<Task>();
            let rx = Arc::new(Mutex::new(rx));
            for slot in 0..ce.slots.max(1) {
                let rx = rx.clone();
                let shared = shared.clone();
                let site = ce.site.clone();
                threads.push(
                    thread::Builder::new()
                        .name(format!("ce-{}-{slot}", ce.site))
                        .spawn(move || ce_slot(&shared, &site, slot, &rx))?,
                );
            }
            ce_queues.push((ce.site.clone(), tx));
        }
        let (rb_tx, rb_rx) = mpsc::channel::<Task>();
        threads.push(
            thread::Builder::new()
                .name("rb".into())
                .spawn(move || broker(rb_rx, ce_queues))?,
        );
        Ok(Self {
            shared,
            rb_tx: Some(rb_tx),
            threads,
            sites: ce_nodes.iter().map(|c| c.site.clone()).collect(),
            next_index: AtomicUsize::new(0),
        })
    }

    /// Hands a rewritten job description to the broker. Input sandbox
    /// files are taken from `sandbox_dir`; the wrapper itself is provided
    /// by the worker node.
    pub fn submit(&self, jdl_text: &str, sandbox_dir: &Path) -> Result<SimJobHandle, SubmitError> {
        let doc = parse_jdl(jdl_text)?;
        let violations = validate_monitoring_jdl(&doc);
        if !violations.is_empty() {
            return Err(SubmitError::ValidationFailed(violations));
        }
        let args = WrapperArgs::from_jdl(&doc)?;
        if args.site != ANY_SITE && !self.sites.contains(&args.site) {
            return Err(SubmitError::UnknownSite(args.site));
        }
        let mut sandbox = Vec::new();
        if let Some(files) = doc.get("InputSandbox").and_then(JdlValue::as_list) {
            for name in files.iter().filter(|f| f.as_str() != WRAPPER_EXECUTABLE) {
                let path = sandbox_dir.join(name);
                if !path.is_file() {
                    return Err(SubmitError::MissingSandboxFile(name.clone()));
                }
                sandbox.push(path);
            }
        }
        let index = self.next_index.fetch_add(1, Ordering::SeqCst);
        self.shared
            .credentials
            .lock()
            .unwrap()
            .push((args.job_id.clone(), args.password.clone()));
        let (reply, result) = mpsc::channel();
        let job_id = args.job_id.clone();
        let task = Task {
            index,
            requested_site: args.site.clone(),
            args,
            sandbox,
            reply,
        };
        self.rb_tx
            .as_ref()
            .ok_or(SubmitError::ShutDown)?
            .send(task)
            .map_err(|_| SubmitError::ShutDown)?;
        Ok(SimJobHandle {
            index,
            job_id,
            result,
        })
    }

    /// WN lifetimes recorded so far.
    pub fn schedule(&self) -> Vec<ScheduleEntry> {
        let mut trace = self.shared.trace.lock().unwrap().clone();
        trace.sort_by_key(|e| (e.start_us, e.job_index));
        trace
    }

    /// `(job_id, password)` of every accepted submission, for the
    /// credential audit.
    pub(crate) fn credentials(&self) -> Vec<(String, String)> {
        self.shared.credentials.lock().unwrap().clone()
    }

    /// Kills running worker nodes; queued jobs are dropped.
    pub fn abort(&self) {
        self.shared.abort.store(true, Ordering::SeqCst);
    }

    /// Stops accepting jobs and waits for queued ones to finish.
    pub fn shutdown(mut self) {
        self.join();
    }

    fn join(&mut self) {
        self.rb_tx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Grid {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.abort();
            self.join();
        }
    }
}

fn broker(rx: Receiver<Task>, ces: Vec<(String, Sender<Task>)>) {
    let mut next = 0usize;
    for task in rx {
        let target = if task.requested_site == ANY_SITE {
            let i = next % ces.len().max(1);
            next += 1;
            ces.get(i)
        } else {
            ces.iter().find(|(site, _)| *site == task.requested_site)
        };
        match target {
            Some((_, tx)) => {
                let _ = tx.send(task);
            }
            None => log::error!("job {} has no computing element", task.index),
        }
    }
}

fn ce_slot(shared: &Shared, site: &str, slot: usize, queue: &Mutex<Receiver<Task>>) {
    loop {
        let task = match queue.lock().unwrap().recv() {
            Ok(t) => t,
            Err(_) => return,
        };
        let job_id = task.args.job_id.clone();
        let index = task.index;
        let reply = task.reply.clone();
        let result = run_worker_node(shared, site, slot, task).unwrap_or_else(|e| WnResult {
            index,
            job_id,
            site: site.to_string(),
            exit_code: None,
            work_dir: shared.work_dir.join(index.to_string()),
            stdout_path: PathBuf::new(),
            error: Some(e.to_string()),
        });
        let _ = reply.send(result);
    }
}

fn micros_since(start: Instant) -> u64 {
    u64::try_from(start.elapsed().as_micros()).unwrap_or(u64::MAX)
}

fn run_worker_node(shared: &Shared, site: &str, slot: usize, task: Task) -> io::Result<WnResult> {
    if shared.abort.load(Ordering::SeqCst) {
        return Err(io::Error::other("aborted before start"));
    }
    let dir = shared.work_dir.join(task.index.to_string());
    fs::create_dir_all(&dir)?;
    for file in &task.sandbox {
        if let Some(name) = file.file_name() {
            fs::copy(file, dir.join(name))?;
        }
    }
    let stdout_path = match &task.args.stdout_path {
        Some(p) => dir.join(p),
        None => dir.join(WN_STDOUT),
    };
    let mut command = Command::new(&shared.wrapper.program);
    command
        .args(&shared.wrapper.prefix_args)
        .args(task.args.to_cli_args())
        .current_dir(&dir)
        .env(AUDIT_FILE_ENV, &shared.audit_file)
        .env(AUDIT_ROLE_ENV, "wn")
        .env(SPOOL_DIR_ENV, &dir)
        .stdin(Stdio::null())
        .stdout(fs::File::create(dir.join(WN_STDOUT))?)
        .stderr(fs::File::create(dir.join(WN_STDERR))?);

    let start_us = micros_since(shared.start);
    let mut child = command.spawn()?;
    let mut error = None;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if shared.abort.load(Ordering::SeqCst) {
            let _ = child.kill();
            let _ = child.wait();
            error = Some("aborted".to_string());
            break None;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let end_us = micros_since(shared.start);
    shared.trace.lock().unwrap().push(ScheduleEntry {
        job_index: task.index,
        site: site.to_string(),
        slot,
        start_us,
        end_us,
    });
    Ok(WnResult {
        index: task.index,
        job_id: task.args.job_id,
        site: site.to_string(),
        exit_code: status.map(exit_code_of),
        work_dir: dir,
        stdout_path,
        error,
    })
}
