use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::client::{Dialer, TcpDialer};

/// Environment variable naming the file a WN process appends its connects to.
pub const AUDIT_FILE_ENV: &str = "ATM_AUDIT_FILE";
/// Environment variable naming the role of the process writing the audit file.
pub const AUDIT_ROLE_ENV: &str = "ATM_AUDIT_ROLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ui,
    Rb,
    Ce,
    Wn,
    Atm,
    Unknown,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Ui, Role::Rb, Role::Ce, Role::Wn, Role::Atm, Role::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Ui => "ui",
            Role::Rb => "rb",
            Role::Ce => "ce",
            Role::Wn => "wn",
            Role::Atm => "atm",
            Role::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// One observed TCP connect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionRecord {
    pub initiator: Role,
    pub target: Role,
    /// `host:port` as dialed.
    pub target_addr: String,
    pub timestamp: DateTime<Utc>,
}

impl ConnectionRecord {
    pub fn new(initiator: Role, target: Role, target_addr: impl Into<String>) -> Self {
        Self {
            initiator,
            target,
            target_addr: target_addr.into(),
            timestamp: Utc::now(),
        }
    }
}

/// Every connect seen during a run, in the order it was recorded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionAudit {
    pub records: Vec<ConnectionRecord>,
}

impl ConnectionAudit {
    /// Connect counts per (initiator, target) edge.
    pub fn edges(&self) -> BTreeMap<(Role, Role), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.initiator, r.target)).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutboundRule {
    /// A grid service or the ATM server connected into a worker node.
    InboundToWorker,
    /// A worker node connected somewhere other than an ATM server.
    WorkerToNonAtm,
}

/// A connect that breaks the outbound-only rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundViolation {
    pub rule: OutboundRule,
    /// Position in [`ConnectionAudit::records`].
    pub index: usize,
    pub initiator: Role,
    pub target: Role,
    pub target_addr: String,
}

impl fmt::Display for OutboundViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.rule {
            OutboundRule::InboundToWorker => "inbound connection to a worker node",
            OutboundRule::WorkerToNonAtm => "worker node connected to a non-ATM host",
        };
        write!(
            f,
            "{what}: {} -> {} ({}) at record {}",
            self.initiator, self.target, self.target_addr, self.index
        )
    }
}

/// Checks that nobody connects into a worker node and that worker nodes
/// talk only to ATM servers. One violation per offending record.
pub fn audit_outbound_only(audit: &ConnectionAudit) -> Vec<OutboundViolation> {
    audit
        .records
        .iter()
        .enumerate()
        .filter_map(|(index, r)| {
            let rule = match (r.initiator, r.target) {
                (Role::Atm | Role::Rb | Role::Ce, Role::Wn) => OutboundRule::InboundToWorker,
                (Role::Wn, target) if target != Role::Atm => OutboundRule::WorkerToNonAtm,
                _ => return None,
            };
            Some(OutboundViolation {
                rule,
                index,
                initiator: r.initiator,
                target: r.target,
                target_addr: r.target_addr.clone(),
            })
        })
        .collect()
}

/// Flags groups of jobs that were handed the same password, which is how
/// the pre-ticket scheme worked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedPasswordViolation {
    pub job_ids: Vec<String>,
}

impl fmt::Display for SharedPasswordViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "jobs share one password: {}", self.job_ids.join(", "))
    }
}

/// Groups `(job_id, password)` pairs by password. Only job ids leave this
/// function; the passwords themselves are never reported.
pub fn audit_credentials<'a, I>(credentials: I) -> Vec<SharedPasswordViolation>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut by_password: HashMap<&str, Vec<String>> = HashMap::new();
    for (job_id, password) in credentials {
        by_password.entry(password).or_default().push(job_id.to_string());
    }
    let mut out: Vec<_> = by_password
        .into_values()
        .filter(|ids| ids.len() > 1)
        .map(|mut job_ids| {
            job_ids.sort();
            SharedPasswordViolation { job_ids }
        })
        .collect();
    out.sort_by(|a, b| a.job_ids.cmp(&b.job_ids));
    out
}

/// Shared, append-only record of connects plus the address book used to
/// name their targets.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    inner: Arc<Mutex<AuditInner>>,
}

#[derive(Debug, Default)]
struct AuditInner {
    records: Vec<ConnectionRecord>,
    roles: HashMap<String, Role>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares that `addr` (`host:port`) belongs to a process with `role`.
    pub fn register(&self, addr: impl Into<String>, role: Role) {
        self.inner.lock().unwrap().roles.insert(addr.into(), role);
    }

    pub fn role_of(&self, addr: &str) -> Role {
        self.inner
            .lock()
            .unwrap()
            .roles
            .get(addr)
            .copied()
            .unwrap_or(Role::Unknown)
    }

    pub fn record(&self, record: ConnectionRecord) {
        self.inner.lock().unwrap().records.push(record);
    }

    /// Records a connect from `initiator` to `addr`, naming the target from
    /// the address book.
    pub fn record_connect(&self, initiator: Role, addr: &str) {
        let target = self.role_of(addr);
        self.record(ConnectionRecord::new(initiator, target, addr));
    }

    /// Pulls in the records a subprocess wrote with a [`FileAuditSink`].
    /// Targets are renamed from the address book because the subprocess
    /// cannot know them.
    pub fn ingest_file(&self, path: &Path) -> io::Result<usize> {
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e),
        };
        let mut n = 0;
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut record: ConnectionRecord = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            record.target = self.role_of(&record.target_addr);
            self.record(record);
            n += 1;
        }
        Ok(n)
    }

    pub fn snapshot(&self) -> ConnectionAudit {
        let mut records = self.inner.lock().unwrap().records.clone();
        records.sort_by_key(|r| r.timestamp);
        ConnectionAudit { records }
    }
}

/// Appends connect records as JSON lines; used by processes that cannot
/// share memory with the simulator.
#[derive(Debug, Clone)]
pub struct FileAuditSink {
    path: PathBuf,
    role: Role,
}

impl FileAuditSink {
    pub fn new(path: impl Into<PathBuf>, role: Role) -> Self {
        Self {
            path: path.into(),
            role,
        }
    }

    /// Reads [`AUDIT_FILE_ENV`] and [`AUDIT_ROLE_ENV`] (role defaults to WN).
    pub fn from_env() -> Option<Self> {
        let path = std::env::var_os(AUDIT_FILE_ENV)?;
        let role = std::env::var(AUDIT_ROLE_ENV)
            .ok()
            .and_then(|r| r.parse().ok())
            .unwrap_or(Role::Wn);
        Some(Self::new(path, role))
    }

    pub fn append(&self, addr: &str) -> io::Result<()> {
        let record = ConnectionRecord::new(self.role, Role::Unknown, addr);
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        // One write per record so concurrent appenders do not interleave.
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?
            .write_all(&line)
    }
}

#[derive(Debug, Clone)]
enum Sink {
    Memory(AuditLog, Role),
    File(FileAuditSink),
}

/// A [`Dialer`] that records every connect before making it.
#[derive(Debug, Clone)]
pub struct AuditedDialer {
    sink: Sink,
}

impl AuditedDialer {
    pub fn new(log: AuditLog, role: Role) -> Self {
        Self {
            sink: Sink::Memory(log, role),
        }
    }

    pub fn to_file(sink: FileAuditSink) -> Self {
        Self {
            sink: Sink::File(sink),
        }
    }
}

impl Dialer for AuditedDialer {
    fn dial(&self, host: &str, port: u16, timeout: Duration) -> io::Result<TcpStream> {
        let addr = format!("{host}:{port}");
        match &self.sink {
            Sink::Memory(log, role) => log.record_connect(*role, &addr),
            Sink::File(sink) => sink.append(&addr)?,
        }
        TcpDialer.dial(host, port, timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: Role, t: Role) -> ConnectionRecord {
        ConnectionRecord::new(i, t, "h:1")
    }

    #[test]
    fn nominal_edges_pass() {
        let audit = ConnectionAudit {
            records: vec![rec(Role::Ui, Role::Atm), rec(Role::Wn, Role::Atm)],
        };
        assert!(audit_outbound_only(&audit).is_empty());
    }

    #[test]
    fn injected_atm_to_wn_edge_is_one_violation() {
        let mut audit = ConnectionAudit {
            records: vec![rec(Role::Ui, Role::Atm), rec(Role::Wn, Role::Atm)],
        };
        audit.records.push(rec(Role::Atm, Role::Wn));
        let v = audit_outbound_only(&audit);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, OutboundRule::InboundToWorker);
        assert_eq!(v[0].index, 2);
        assert!(v[0].to_string().contains("atm -> wn"));
    }

    #[test]
    fn worker_to_unknown_is_flagged() {
        let audit = ConnectionAudit {
            records: vec![rec(Role::Wn, Role::Unknown), rec(Role::Wn, Role::Wn)],
        };
        let v = audit_outbound_only(&audit);
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|v| v.rule == OutboundRule::WorkerToNonAtm));
    }

    #[test]
    fn shared_passwords_are_grouped() {
        let v = audit_credentials([("b", "x"), ("a", "x"), ("c", "y"), ("d", "x")]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].job_ids, ["a", "b", "d"]);
        assert!(audit_credentials([("a", "1"), ("b", "2")]).is_empty());
    }

    #[test]
    fn file_sink_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let sink = FileAuditSink::new(&path, Role::Wn);
        sink.append("127.0.0.1:4000").unwrap();
        sink.append("10.0.0.1:80").unwrap();
        let log = AuditLog::new();
        log.register("127.0.0.1:4000", Role::Atm);
        assert_eq!(log.ingest_file(&path).unwrap(), 2);
        let edges = log.snapshot().edges();
        assert_eq!(edges[&(Role::Wn, Role::Atm)], 1);
        assert_eq!(edges[&(Role::Wn, Role::Unknown)], 1);
        assert_eq!(log.ingest_file(&dir.path().join("missing")).unwrap(), 0);
    }

    #[test]
    fn audited_dialer_records_even_failed_connects() {
        let log = AuditLog::new();
        log.register("127.0.0.1:9", Role::Atm);
        let dialer = AuditedDialer::new(log.clone(), Role::Ui);
        let _ = dialer.dial("127.0.0.1", 9, Duration::from_millis(100));
        let audit = log.snapshot();
        assert_eq!(audit.records.len(), 1);
        assert_eq!((audit.records[0].initiator, audit.records[0].target), (Role::Ui, Role::Atm));
    }
}
