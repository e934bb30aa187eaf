//! A desk-sized grid: UI, resource broker, computing elements and worker
//! nodes, with real ATM servers and real wrapper subprocesses.
//!
//! [`run_scenario`] drives a whole workload through the pipeline and
//! returns a [`ScenarioReport`] with per-job outcomes, the connection audit
//! and a dump of every ATM store. [`audit_outbound_only`] checks the audit
//! for connections into worker nodes.

mod audit;
mod grid;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{Duration as ChronoDuration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{AtmClient, ClientError};
use crate::jdl::{parse_jdl, rewrite_for_monitoring, JdlError, RewriteParams};
use crate::model::{
    Certificate, CertificateAuthority, EventKind, JobState, Progress, SitePolicy, UserKey,
};
use crate::server::{AtmServer, ServerConfig, ServerError, ServerHandle};
use crate::store::{Durability, StoreDump};

pub use audit::{
    audit_credentials, audit_outbound_only, AuditLog, AuditedDialer, ConnectionAudit,
    ConnectionRecord, FileAuditSink, OutboundRule, OutboundViolation, Role,
    SharedPasswordViolation, AUDIT_FILE_ENV, AUDIT_ROLE_ENV,
};
pub use grid::{
    max_concurrency, CeNode, Grid, ScheduleEntry, SimJobHandle, SubmitError, WnResult,
    WrapperCommand, ANY_SITE, WN_STDERR, WN_STDOUT,
};

/// A scenario file: who and what, plus how the workload runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologySpec,
    pub workload: Workload,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Builds the topology under `options.work_dir` and runs the workload.
    pub fn run(&self, options: &SimOptions) -> Result<ScenarioReport, SimError> {
        let topology = SimTopology::build(&self.topology, self.seed, &options.work_dir)?;
        run_scenario(&topology, &self.workload, options)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    /// Certificate subjects; key pairs are generated from the seed.
    pub users: Vec<String>,
    pub atm_servers: Vec<AtmServerSpec>,
    pub ce_nodes: Vec<CeNode>,
    #[serde(default)]
    pub wn_policy: WnPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtmServerSpec {
    pub server_id: String,
    #[serde(default)]
    pub policy: SitePolicy,
    #[serde(default)]
    pub durability: Durability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WnPolicy {
    /// Report any connection into a worker node as a violation.
    pub forbid_inbound: bool,
}

impl Default for WnPolicy {
    fn default() -> Self {
        Self {
            forbid_inbound: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub jobs: Vec<JobSpec>,
    /// RetryCount written into every job description (push period, seconds).
    #[serde(default = "default_retry_count")]
    pub retry_count: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// Run the old scheme where every job gets the same password.
    #[serde(default)]
    pub legacy_shared_password: bool,
    /// Also run every command unwrapped and compare outputs.
    #[serde(default = "default_true")]
    pub check_transparency: bool,
}

fn default_retry_count() -> u32 {
    1
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Subject of the submitting user.
    pub user: String,
    /// `server_id` of the ATM server the job is registered with.
    pub atm: String,
    /// Target site; `*` or absent lets the broker choose.
    #[serde(default)]
    pub site: Option<String>,
    pub program: JobProgram,
    /// Number of identical jobs.
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    1
}

/// What the job runs on the worker node, always as `/bin/sh job.sh`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobProgram {
    /// Prints `completed k from <total> events` for k = step, 2*step, ..
    Progress {
        total: u64,
        step: u64,
        interval_ms: u64,
        #[serde(default)]
        exit_code: i32,
    },
    /// An arbitrary shell script.
    Script { script: String },
}

impl JobProgram {
    pub fn script(&self) -> String {
        match self {
            JobProgram::Progress {
                total,
                step,
                interval_ms,
                exit_code,
            } => {
                let mut s = String::from("#!/bin/sh\n");
                let delay = format!("{}.{:03}", interval_ms / 1000, interval_ms % 1000);
                let mut k = *step.max(&1);
                while k <= *total {
                    let _ = writeln!(s, "echo \"completed {k} from {total} events\"\nsleep {delay}");
                    k += step.max(&1);
                }
                let _ = writeln!(s, "exit {exit_code}");
                s
            }
            JobProgram::Script { script } => script.clone(),
        }
    }
}

pub const JOB_SCRIPT: &str = "job.sh";
pub const JOB_STDOUT: &str = "job.out";
pub const JOB_STDERR: &str = "job.err";
/// The rewritten description, kept in the UI sandbox `work_dir/ui/<index>`.
pub const JOB_JDL: &str = "job.jdl";

/// The unwrapped description every simulated job starts from.
pub fn original_jdl() -> String {
    format!(
        "Executable = \"/bin/sh\";\n\
         StdOutput = \"{JOB_STDOUT}\";\n\
         StdError = \"{JOB_STDERR}\";\n\
         InputSandbox = {{\"{JOB_SCRIPT}\"}};\n\
         OutputSandbox = {{\"{JOB_STDOUT}\",\"{JOB_STDERR}\"}};\n\
         Arguments = \"{JOB_SCRIPT}\";\n"
    )
}

pub struct SimUser {
    pub subject: String,
    pub certificate: Certificate,
    pub key: UserKey,
}

/// A scenario's topology with generated credentials and server configs.
pub struct SimTopology {
    pub seed: u64,
    pub ca: CertificateAuthority,
    pub users: Vec<SimUser>,
    pub atm_servers: Vec<ServerConfig>,
    pub ce_nodes: Vec<CeNode>,
    pub wn_policy: WnPolicy,
}

impl SimTopology {
    /// Generates the CA, user keys and server configs from `seed`. Stores
    /// live under `work_dir/atm/<server_id>`.
    pub fn build(spec: &TopologySpec, seed: u64, work_dir: &Path) -> Result<Self, SimError> {
        if spec.ce_nodes.is_empty() || spec.atm_servers.is_empty() {
            return Err(SimError::Config("need at least one CE and one ATM server".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &spec.atm_servers {
            if !ids.insert(&s.server_id) {
                return Err(SimError::Config(format!("duplicate server {}", s.server_id)));
            }
            s.policy
                .validate()
                .map_err(|e| SimError::Config(format!("{}: {e}", s.server_id)))?;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = CertificateAuthority::generate(&mut rng);
        let not_after = Utc::now() + ChronoDuration::days(1);
        let users = spec
            .users
            .iter()
            .map(|subject| {
                let (certificate, key) = ca.issue(subject, not_after, &mut rng);
                SimUser {
                    subject: subject.clone(),
                    certificate,
                    key,
                }
            })
            .collect();
        let atm_servers = spec
            .atm_servers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut config = ServerConfig::new(
                    &s.server_id,
                    work_dir.join("atm").join(&s.server_id),
                    ca.verification_key(),
                );
                config.policy = s.policy.clone();
                config.durability = s.durability;
                config.rng_seed = Some(seed.wrapping_add(i as u64 + 1));
                config
            })
            .collect();
        Ok(Self {
            seed,
            ca,
            users,
            atm_servers,
            ce_nodes: spec.ce_nodes.clone(),
            wn_policy: spec.wn_policy,
        })
    }
}

/// Where and how a scenario runs.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Must be empty or absent; everything the run writes goes here.
    pub work_dir: PathBuf,
    pub wrapper: WrapperCommand,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Jdl(#[from] JdlError),
    #[error("scenario timed out after {elapsed:?} with {unfinished} jobs still running")]
    ScenarioTimeout { elapsed: Duration, unfinished: usize },
}

/// What happened to one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub index: usize,
    pub user: String,
    pub server_id: String,
    pub job_id: Option<String>,
    pub requested_site: String,
    /// The CE the broker picked.
    pub site: Option<String>,
    pub exit_code: Option<i32>,
    /// Final state on the ATM server.
    pub state: Option<JobState>,
    pub progress_events: usize,
    pub last_progress: Option<Progress>,
    /// `finished` plus `failed` events stored for the job.
    pub terminal_events: usize,
    /// Wrapped and unwrapped runs agree on stdout bytes and exit code.
    pub transparent: Option<bool>,
    pub error: Option<String>,
}

/// The jobs a user sees when querying one server with their certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserQuery {
    pub subject: String,
    pub server_id: String,
    pub job_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub elapsed_ms: u64,
    pub outcomes: Vec<JobOutcome>,
    pub audit: ConnectionAudit,
    pub outbound_violations: Vec<OutboundViolation>,
    pub credential_violations: Vec<SharedPasswordViolation>,
    pub schedule: Vec<ScheduleEntry>,
    pub user_queries: Vec<UserQuery>,
    pub server_dumps: BTreeMap<String, StoreDump>,
}

impl ScenarioReport {
    /// Terminal events stored across all servers equal the number of jobs.
    pub fn conservation_holds(&self) -> bool {
        let terminal: usize = self
            .server_dumps
            .values()
            .flat_map(|d| d.events.values().flatten())
            .filter(|e| matches!(e.kind, EventKind::Finished | EventKind::Failed))
            .count();
        terminal == self.outcomes.len()
    }

    pub fn all_finished_ok(&self) -> bool {
        self.outcomes
            .iter()
            .all(|o| o.exit_code == Some(0) && o.state == Some(JobState::Completed))
    }

    /// Server dumps without anything that legitimately differs between two
    /// runs with the same seed: timestamps, heartbeats and sequence numbers.
    pub fn canonical_dumps(&self) -> Value {
        let servers: serde_json::Map<String, Value> = self
            .server_dumps
            .iter()
            .map(|(id, dump)| {
                let users: Vec<Value> = dump
                    .users
                    .iter()
                    .map(|u| json!([u.subject, u.max_jobs, u.active_jobs]))
                    .collect();
                let jobs: Vec<Value> = dump
                    .jobs
                    .iter()
                    .map(|j| json!([j.job_id, j.owner_subject, j.site, j.state, j.password_hash]))
                    .collect();
                let events: serde_json::Map<String, Value> = dump
                    .events
                    .iter()
                    .map(|(job, events)| {
                        let kept: Vec<Value> = events
                            .iter()
                            .filter(|e| e.kind != EventKind::Heartbeat)
                            .map(|e| json!([e.kind, e.progress, e.exit_code, e.raw, e.file_size]))
                            .collect();
                        (job.clone(), Value::Array(kept))
                    })
                    .collect();
                (id.clone(), json!({"users": users, "jobs": jobs, "events": events}))
            })
            .collect();
        Value::Object(servers)
    }
}

struct Pending {
    handle: SimJobHandle,
    sandbox: PathBuf,
}

/// Runs `workload` on a fresh instance of `topology`: starts the ATM
/// servers, registers users and jobs from the UI, submits the rewritten
/// descriptions to the broker and waits for every worker node.
pub fn run_scenario(
    topology: &SimTopology,
    workload: &Workload,
    options: &SimOptions,
) -> Result<ScenarioReport, SimError> {
    let started = Instant::now();
    let timeout = Duration::try_from_secs_f64(workload.timeout_secs)
        .map_err(|e| SimError::Config(format!("timeout_secs: {e}")))?;
    let deadline = started + timeout;
    for spec in &workload.jobs {
        if !topology.users.iter().any(|u| u.subject == spec.user) {
            return Err(SimError::Config(format!("unknown user {}", spec.user)));
        }
        if !topology.atm_servers.iter().any(|s| s.server_id == spec.atm) {
            return Err(SimError::Config(format!("unknown ATM server {}", spec.atm)));
        }
    }
    let work = &options.work_dir;
    fs::create_dir_all(work)?;
    if fs::read_dir(work)?.next().is_some() {
        return Err(SimError::Config(format!("{} is not empty", work.display())));
    }

    let audit = AuditLog::new();
    let mut servers: Vec<ServerHandle> = Vec::new();
    for config in &topology.atm_servers {
        let handle = AtmServer::start(config.clone())?;
        audit.register(handle.addr().to_string(), Role::Atm);
        servers.push(handle);
    }
    let server_index: HashMap<&str, usize> = servers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.server_id(), i))
        .collect();
    let users: HashMap<&str, &SimUser> =
        topology.users.iter().map(|u| (u.subject.as_str(), u)).collect();
    let ui_dialer = Arc::new(AuditedDialer::new(audit.clone(), Role::Ui));
    let clients: Vec<AtmClient> = servers
        .iter()
        .map(|s| {
            AtmClient::new(s.url())
                .map(|c| c.with_dialer(ui_dialer.clone()))
                .map_err(|e| SimError::Config(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let audit_file = work.join("wn-audit.jsonl");
    let grid = Grid::start(
        &topology.ce_nodes,
        options.wrapper.clone(),
        &work.join("wn"),
        &audit_file,
    )?;

    let mut outcomes = Vec::new();
    let mut pending: Vec<Option<Pending>> = Vec::new();
    let mut registered: BTreeSet<(usize, String)> = BTreeSet::new();
    let mut shared_password: Option<String> = None;
    let template = parse_jdl(&original_jdl())?;

    for spec in &workload.jobs {
        for _ in 0..spec.count {
            let index = outcomes.len();
            let requested_site = spec.site.clone().unwrap_or_else(|| ANY_SITE.to_string());
            let mut outcome = JobOutcome {
                index,
                user: spec.user.clone(),
                server_id: spec.atm.clone(),
                job_id: None,
                requested_site: requested_site.clone(),
                site: None,
                exit_code: None,
                state: None,
                progress_events: 0,
                last_progress: None,
                terminal_events: 0,
                transparent: None,
                error: None,
            };
            let submitted = (|| -> Result<Pending, String> {
                let user = users
                    .get(spec.user.as_str())
                    .ok_or_else(|| format!("unknown user {}", spec.user))?;
                let s = *server_index
                    .get(spec.atm.as_str())
                    .ok_or_else(|| format!("unknown server {}", spec.atm))?;
                let client = &clients[s];
                if registered.insert((s, user.subject.clone())) {
                    client
                        .register_user(&user.certificate, &user.key)
                        .map_err(|e| format!("user registration: {e}"))?;
                }
                let ticket = client
                    .register_job(&user.certificate, &user.key, &requested_site)
                    .map_err(|e| format!("job registration: {e}"))?;
                outcome.job_id = Some(ticket.job_id.clone());
                let password = if workload.legacy_shared_password {
                    shared_password.get_or_insert(ticket.password).clone()
                } else {
                    ticket.password
                };
                let params = RewriteParams::new(&ticket.job_id, &password, &requested_site, &ticket.atm_url)
                    .with_retry_count(workload.retry_count);
                let jdl = rewrite_for_monitoring(&template, &params).map_err(|e| e.to_string())?;
                let sandbox = work.join("ui").join(index.to_string());
                fs::create_dir_all(&sandbox).map_err(|e| e.to_string())?;
                fs::write(sandbox.join(JOB_SCRIPT), spec.program.script()).map_err(|e| e.to_string())?;
                let text = jdl.render();
                fs::write(sandbox.join(JOB_JDL), &text).map_err(|e| e.to_string())?;
                let handle = grid.submit(&text, &sandbox).map_err(|e| e.to_string())?;
                Ok(Pending { handle, sandbox })
            })();
            match submitted {
                Ok(p) => pending.push(Some(p)),
                Err(e) => {
                    outcome.error = Some(e);
                    pending.push(None);
                }
            }
            outcomes.push(outcome);
        }
    }

    // Collect worker node results.
    let mut results: Vec<Option<WnResult>> = vec![None; outcomes.len()];
    for (i, p) in pending.iter().enumerate() {
        let Some(p) = p else { continue };
        let left = deadline.saturating_duration_since(Instant::now());
        match p.handle.wait_timeout(left) {
            Some(r) => results[i] = Some(r),
            None => {
                grid.abort();
                let unfinished = pending.iter().flatten().count()
                    - results.iter().flatten().count();
                return Err(SimError::ScenarioTimeout {
                    elapsed: started.elapsed(),
                    unfinished,
                });
            }
        }
    }
    let schedule = grid.schedule();
    let credentials = grid.credentials();
    grid.shutdown();
    audit.ingest_file(&audit_file)?;

    // Unwrapped reruns for the transparency check, all at once.
    let direct: Vec<Option<std::thread::JoinHandle<io::Result<DirectRun>>>> =
        if workload.check_transparency {
            pending
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let p = p.as_ref()?;
                    let dir = work.join("direct").join(i.to_string());
                    let script = p.sandbox.join(JOB_SCRIPT);
                    Some(std::thread::spawn(move || run_direct(&script, &dir)))
                })
                .collect()
        } else {
            Vec::new()
        };
    for (i, handle) in direct.into_iter().enumerate() {
        let (Some(handle), Some(result)) = (handle, &results[i]) else { continue };
        let wrapped_out = fs::read(&result.stdout_path).unwrap_or_default();
        outcomes[i].transparent = Some(match handle.join() {
            Ok(Ok((code, out))) => code == result.exit_code && out == wrapped_out,
            _ => false,
        });
    }

    let mut user_queries = Vec::new();
    for (s, subject) in &registered {
        let user = users[subject.as_str()];
        let job_ids = match clients[*s].query(&user.certificate, &user.key, None) {
            Ok(r) => r.jobs.into_iter().map(|j| j.record.job_id).collect(),
            Err(ClientError::Api { error, .. }) => {
                log::warn!("query for {subject}: {error}");
                Vec::new()
            }
            Err(e) => return Err(SimError::Io(io::Error::other(e.to_string()))),
        };
        user_queries.push(UserQuery {
            subject: subject.clone(),
            server_id: servers[*s].server_id().to_string(),
            job_ids,
        });
    }

    let mut server_dumps = BTreeMap::new();
    for server in servers {
        let dump = server.service().store().dump();
        server_dumps.insert(server.server_id().to_string(), dump);
        server.shutdown()?;
    }

    for (outcome, result) in outcomes.iter_mut().zip(&results) {
        if let Some(r) = result {
            outcome.site = Some(r.site.clone());
            outcome.exit_code = r.exit_code;
            if r.error.is_some() {
                outcome.error = r.error.clone();
            }
        }
        let (Some(job_id), Some(dump)) = (&outcome.job_id, server_dumps.get(&outcome.server_id))
        else {
            continue;
        };
        outcome.state = dump.jobs.iter().find(|j| &j.job_id == job_id).map(|j| j.state);
        let events = dump.events.get(job_id).map(Vec::as_slice).unwrap_or(&[]);
        outcome.progress_events = events.iter().filter(|e| e.kind == EventKind::Progress).count();
        outcome.last_progress = events.iter().rev().find_map(|e| e.progress);
        outcome.terminal_events = events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Finished | EventKind::Failed))
            .count();
    }

    let audit = audit.snapshot();
    let outbound_violations = if topology.wn_policy.forbid_inbound {
        audit_outbound_only(&audit)
    } else {
        Vec::new()
    };
    let credential_violations =
        audit_credentials(credentials.iter().map(|(j, p)| (j.as_str(), p.as_str())));
    Ok(ScenarioReport {
        seed: topology.seed,
        elapsed_ms: u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX),
        outcomes,
        audit,
        outbound_violations,
        credential_violations,
        schedule,
        user_queries,
        server_dumps,
    })
}

/// Runs `/bin/sh job.sh` directly in a fresh directory.
/// Exit code and stdout bytes of an unwrapped run.
type DirectRun = (Option<i32>, Vec<u8>);

fn run_direct(script: &Path, dir: &Path) -> io::Result<DirectRun> {
    fs::create_dir_all(dir)?;
    fs::copy(script, dir.join(JOB_SCRIPT))?;
    let output = Command::new("/bin/sh")
        .arg(JOB_SCRIPT)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stderr(Stdio::null())
        .output()?;
    Ok((Some(crate::agent::exit_code_of(output.status)), output.stdout))
}
