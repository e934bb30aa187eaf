//! File-backed storage for the allowed-user, allowed-job and job-status
//! databases.
//!
//! Layout under the store root:
//!
//! ```text
//! users.jsonl            one UserRecord per line, last write wins per subject
//! jobs.jsonl             one JobRecord per line, last write wins per job_id
//! events/<job_id>.jsonl  the job's MonitoringEvents in seq order
//! LOCK                   advisory lock held by the owning process
//! ```
//!
//! Every table is an append-only JSON-lines log replayed into memory on
//! open. A write is acknowledged only after its line has been handed to the
//! OS (or fsynced, with [`Durability::Sync`]).

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    is_valid_job_id, EventReport, JobRecord, JobState, MonitoringEvent, UserRecord,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} not found")]
    NotFound(String),
    #[error("illegal job transition {from} -> {to}")]
    IllegalTransition { from: JobState, to: JobState },
    #[error("store at {0} is locked by another process")]
    Locked(PathBuf),
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid job id {0:?}")]
    InvalidJobId(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// When an appended line counts as durable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// Written to the OS page cache; survives process death.
    #[default]
    Flush,
    /// fsync after every append; survives power loss.
    Sync,
}

/// An append-only JSON-lines file.
struct Log {
    path: PathBuf,
    file: File,
    durability: Durability,
}

impl Log {
    /// Opens `path`, replays its records and truncates a torn final line.
    fn open<T: DeserializeOwned>(path: PathBuf, durability: Durability) -> Result<(Self, Vec<T>)> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(&path))?;

        let mut records = Vec::new();
        let mut offset = 0;
        let mut line_no = 0;
        while offset < bytes.len() {
            line_no += 1;
            let (line, next, complete) = match bytes[offset..].iter().position(|&b| b == b'\n') {
                Some(n) => (&bytes[offset..offset + n], offset + n + 1, true),
                None => (&bytes[offset..], bytes.len(), false),
            };
            if line.iter().all(u8::is_ascii_whitespace) {
                offset = next;
                continue;
            }
            match serde_json::from_slice(line) {
                Ok(record) if complete => records.push(record),
                // A partial final line is a write that was never acknowledged.
                _ if !complete => {
                    log::warn!("{}: dropping torn final record", path.display());
                    file.set_len(offset as u64).map_err(io_err(&path))?;
                    break;
                }
                Ok(_) => unreachable!(),
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path,
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
            offset = next;
        }
        Ok((
            Self {
                path,
                file,
                durability,
            },
            records,
        ))
    }

    fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        if self.durability == Durability::Sync {
            self.file.sync_data().map_err(io_err(&self.path))?;
        }
        Ok(())
    }
}

struct UserTable {
    log: Log,
    rows: BTreeMap<String, UserRecord>,
}

struct JobTable {
    log: Log,
    rows: BTreeMap<String, JobRecord>,
}

struct EventLog {
    log: Option<Log>,
    events: Vec<MonitoringEvent>,
    last_client_seq: Option<u64>,
}

/// Handle to an open store. Cheap to share behind an `Arc`.
pub struct Store {
    root: PathBuf,
    durability: Durability,
    users: Mutex<UserTable>,
    jobs: Mutex<JobTable>,
    events: Mutex<HashMap<String, Arc<Mutex<EventLog>>>>,
    _lock: File,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// A point-in-time copy of every table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDump {
    pub users: Vec<UserRecord>,
    pub jobs: Vec<JobRecord>,
    pub events: BTreeMap<String, Vec<MonitoringEvent>>,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(root, Durability::default())
    }

    pub fn open_with(root: impl AsRef<Path>, durability: Durability) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let events_dir = root.join("events");
        fs::create_dir_all(&events_dir).map_err(io_err(&events_dir))?;

        let lock_path = root.join("LOCK");
        let lock_file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        match lock_file.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(root)),
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&lock_path)(e)),
        }

        let (log, records) = Log::open::<UserRecord>(root.join("users.jsonl"), durability)?;
        let users = UserTable {
            log,
            rows: records.into_iter().map(|u| (u.subject.clone(), u)).collect(),
        };
        let (log, records) = Log::open::<JobRecord>(root.join("jobs.jsonl"), durability)?;
        let jobs = JobTable {
            log,
            rows: records.into_iter().map(|j| (j.job_id.clone(), j)).collect(),
        };

        let mut events = HashMap::new();
        for entry in fs::read_dir(&events_dir).map_err(io_err(&events_dir))? {
            let path = entry.map_err(io_err(&events_dir))?.path();
            let Some(job_id) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".jsonl"))
                .filter(|id| is_valid_job_id(id))
                .map(str::to_string)
            else {
                continue;
            };
            let (log, records) = Log::open::<MonitoringEvent>(path.clone(), durability)?;
            for (i, event) in records.iter().enumerate() {
                if event.seq != i as u64 + 1 || event.job_id != job_id {
                    return Err(StoreError::Corrupt {
                        path,
                        line: i + 1,
                        message: format!("expected seq {} of job {job_id}", i + 1),
                    });
                }
            }
            let last_client_seq = records.iter().filter_map(|e| e.client_seq).max();
            events.insert(
                job_id,
                Arc::new(Mutex::new(EventLog {
                    log: Some(log),
                    events: records,
                    last_client_seq,
                })),
            );
        }

        Ok(Self {
            root,
            durability,
            users: Mutex::new(users),
            jobs: Mutex::new(jobs),
            events: Mutex::new(events),
            _lock: lock_file,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put_user(&self, user: UserRecord) -> Result<()> {
        let mut table = lock(&self.users);
        table.log.append(&user)?;
        table.rows.insert(user.subject.clone(), user);
        Ok(())
    }

    pub fn get_user(&self, subject: &str) -> Result<UserRecord> {
        lock(&self.users)
            .rows
            .get(subject)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("user {subject}")))
    }

    pub fn list_users(&self) -> Vec<UserRecord> {
        lock(&self.users).rows.values().cloned().collect()
    }

    /// Read-modify-write of one user row under the table lock. `f`
    /// returning false leaves the row untouched and yields `None`.
    pub fn try_update_user(
        &self,
        subject: &str,
        f: impl FnOnce(&mut UserRecord) -> bool,
    ) -> Result<Option<UserRecord>> {
        let mut table = lock(&self.users);
        let mut user = table
            .rows
            .get(subject)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("user {subject}")))?;
        if !f(&mut user) {
            return Ok(None);
        }
        table.log.append(&user)?;
        table.rows.insert(user.subject.clone(), user.clone());
        Ok(Some(user))
    }

    pub fn put_job(&self, job: JobRecord) -> Result<()> {
        if !is_valid_job_id(&job.job_id) {
            return Err(StoreError::InvalidJobId(job.job_id));
        }
        let mut table = lock(&self.jobs);
        table.log.append(&job)?;
        table.rows.insert(job.job_id.clone(), job);
        Ok(())
    }

    pub fn get_job(&self, job_id: &str) -> Result<JobRecord> {
        lock(&self.jobs)
            .rows
            .get(job_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("job {job_id}")))
    }

    pub fn list_jobs(&self) -> Vec<JobRecord> {
        lock(&self.jobs).rows.values().cloned().collect()
    }

    pub fn list_jobs_by_owner(&self, subject: &str) -> Vec<JobRecord> {
        lock(&self.jobs)
            .rows
            .values()
            .filter(|j| j.owner_subject == subject)
            .cloned()
            .collect()
    }

    /// Moves a job along the state machine and returns the updated record.
    pub fn transition_job(&self, job_id: &str, next: JobState) -> Result<JobRecord> {
        let mut table = lock(&self.jobs);
        let mut job = table
            .rows
            .get(job_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("job {job_id}")))?;
        if !job.state.can_transition_to(next) {
            return Err(StoreError::IllegalTransition {
                from: job.state,
                to: next,
            });
        }
        job.state = next;
        table.log.append(&job)?;
        table.rows.insert(job_id.to_string(), job.clone());
        Ok(job)
    }

    fn event_log(&self, job_id: &str) -> Result<Arc<Mutex<EventLog>>> {
        if !lock(&self.jobs).rows.contains_key(job_id) {
            return Err(StoreError::NotFound(format!("job {job_id}")));
        }
        let mut logs = lock(&self.events);
        Ok(logs
            .entry(job_id.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(EventLog {
                    log: None,
                    events: Vec::new(),
                    last_client_seq: None,
                }))
            })
            .clone())
    }

    /// Appends an event and returns its sequence number.
    ///
    /// A report whose `client_seq` is not newer than the last one recorded
    /// for the job is a redelivery; it is not stored again and the seq of
    /// the original is returned.
    pub fn append_event(&self, job_id: &str, report: EventReport) -> Result<u64> {
        let log = self.event_log(job_id)?;
        let mut log = lock(&log);
        if let (Some(incoming), Some(last)) = (report.client_seq, log.last_client_seq) {
            if incoming <= last {
                let seq = log
                    .events
                    .iter()
                    .find(|e| e.client_seq == Some(incoming))
                    .map_or(log.events.len() as u64, |e| e.seq);
                return Ok(seq);
            }
        }
        let seq = log.events.len() as u64 + 1;
        let event = report.into_event(job_id, seq);
        if log.log.is_none() {
            let path = self.root.join("events").join(format!("{job_id}.jsonl"));
            let (file, _) = Log::open::<MonitoringEvent>(path, self.durability)?;
            log.log = Some(file);
        }
        log.log.as_mut().expect("opened above").append(&event)?;
        if event.client_seq.is_some() {
            log.last_client_seq = event.client_seq;
        }
        log.events.push(event);
        Ok(seq)
    }

    /// If `client_seq` was already delivered for this job, the seq it was
    /// stored under.
    pub fn find_delivered(&self, job_id: &str, client_seq: u64) -> Result<Option<u64>> {
        let log = self.event_log(job_id)?;
        let log = lock(&log);
        if log.last_client_seq.is_none_or(|last| client_seq > last) {
            return Ok(None);
        }
        Ok(Some(
            log.events
                .iter()
                .find(|e| e.client_seq == Some(client_seq))
                .map_or(log.events.len() as u64, |e| e.seq),
        ))
    }

    /// Events with `seq >= from_seq`, in order.
    pub fn read_events(&self, job_id: &str, from_seq: u64) -> Result<Vec<MonitoringEvent>> {
        let log = self.event_log(job_id)?;
        let log = lock(&log);
        let skip = from_seq.saturating_sub(1) as usize;
        Ok(log.events.iter().skip(skip).cloned().collect())
    }

    /// fsyncs every open log file.
    pub fn sync(&self) -> io::Result<()> {
        lock(&self.users).log.file.sync_data()?;
        lock(&self.jobs).log.file.sync_data()?;
        let logs: Vec<_> = lock(&self.events).values().cloned().collect();
        for log in logs {
            if let Some(l) = &lock(&log).log {
                l.file.sync_data()?;
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> StoreDump {
        let users = self.list_users();
        let jobs = self.list_jobs();
        let events = jobs
            .iter()
            .map(|j| {
                let events = self.read_events(&j.job_id, 1).unwrap_or_default();
                (j.job_id.clone(), events)
            })
            .collect();
        StoreDump {
            users,
            jobs,
            events,
        }
    }
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hash_password, EventKind};
    use chrono::Utc;

    fn user(subject: &str) -> UserRecord {
        UserRecord {
            subject: subject.into(),
            max_jobs: 5,
            registered_at: Utc::now(),
            active_jobs: 0,
        }
    }

    fn job(id: &str, owner: &str) -> JobRecord {
        JobRecord {
            job_id: id.into(),
            owner_subject: owner.into(),
            password_hash: hash_password("pw", b"salt"),
            site: "ce".into(),
            state: JobState::Registered,
            created_at: Utc::now(),
        }
    }

    #[test]
    fn put_get_user() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.get_user("a"), Err(StoreError::NotFound(_))));
        let u = user("a");
        store.put_user(u.clone()).unwrap();
        assert_eq!(store.get_user("a").unwrap(), u);
    }

    #[test]
    fn transitions() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_job(job("j1", "a")).unwrap();
        store.transition_job("j1", JobState::Running).unwrap();
        store.transition_job("j1", JobState::Completed).unwrap();
        assert!(matches!(
            store.transition_job("j1", JobState::Running),
            Err(StoreError::IllegalTransition {
                from: JobState::Completed,
                to: JobState::Running
            })
        ));
        assert!(matches!(
            store.transition_job("nope", JobState::Running),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn first_seq_is_one_and_reads_are_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_job(job("j1", "a")).unwrap();
        assert_eq!(
            store
                .append_event("j1", EventReport::new(EventKind::Started))
                .unwrap(),
            1
        );
        for k in 1..=4 {
            store
                .append_event("j1", EventReport::progress(k, 4, None))
                .unwrap();
        }
        let tail = store.read_events("j1", 3).unwrap();
        assert_eq!(tail.iter().map(|e| e.seq).collect::<Vec<_>>(), [3, 4, 5]);
        assert!(store.read_events("j1", 9).unwrap().is_empty());
        assert!(matches!(
            store.append_event("nope", EventReport::new(EventKind::Heartbeat)),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn duplicate_client_seq_is_not_stored_twice() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_job(job("j1", "a")).unwrap();
        let mut r = EventReport::new(EventKind::Heartbeat);
        r.client_seq = Some(1);
        assert_eq!(store.append_event("j1", r.clone()).unwrap(), 1);
        assert_eq!(store.append_event("j1", r).unwrap(), 1);
        assert_eq!(store.read_events("j1", 1).unwrap().len(), 1);
    }

    #[test]
    fn second_open_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _store = Store::open(dir.path()).unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(StoreError::Locked(_))
        ));
    }

    #[test]
    fn reopen_replays_last_write_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put_user(user("a")).unwrap();
            store.put_job(job("j1", "a")).unwrap();
            store.transition_job("j1", JobState::Running).unwrap();
            store
                .append_event("j1", EventReport::new(EventKind::Started))
                .unwrap();
        }
        let events = dir.path().join("events/j1.jsonl");
        let mut f = OpenOptions::new().append(true).open(&events).unwrap();
        f.write_all(b"{\"job_id\":\"j1\",\"se").unwrap();
        drop(f);

        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.get_job("j1").unwrap().state, JobState::Running);
        assert_eq!(store.read_events("j1", 1).unwrap().len(), 1);
        assert_eq!(
            store
                .append_event("j1", EventReport::new(EventKind::Heartbeat))
                .unwrap(),
            2
        );
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("users.jsonl"), "not json\n{}\n").unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_path_like_job_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(
            store.put_job(job("../x", "a")),
            Err(StoreError::InvalidJobId(_))
        ));
    }
}
