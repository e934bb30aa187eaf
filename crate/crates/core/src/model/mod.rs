//! Domain types shared by the server, the store, the wrapper and the tools.
//!
//! Everything here serializes to JSON objects with snake_case field names;
//! that encoding is used on the wire and in the store files alike.

mod crypto;

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use rand::distributions::Alphanumeric;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crypto::{
    check_password, hash_password, new_salt, sign_request, verify_request, CaVerificationKey,
    Certificate, CertificateAuthority, PasswordDigest, SignedRequest, UserKey, VerifyError,
};

pub(crate) use crypto::b64;

/// Length of generated ticket passwords (alphanumeric characters).
pub const PASSWORD_LEN: usize = 24;

/// The per-job monitoring credential handed out at job registration.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub password: String,
    pub atm_url: String,
    pub site: String,
}

// Keeps the password out of logs and panic messages.
impl std::fmt::Debug for JobTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobTicket")
            .field("job_id", &self.job_id)
            .field("password", &"<redacted>")
            .field("atm_url", &self.atm_url)
            .field("site", &self.site)
            .finish()
    }
}

/// Issues a fresh ticket. With a seeded `rng` the result is reproducible.
pub fn issue_ticket<R: Rng + ?Sized>(atm_url: &str, site: &str, rng: &mut R) -> JobTicket {
    let id_bytes: [u8; 16] = rng.gen();
    JobTicket {
        job_id: b64::encode_url(&id_bytes),
        password: (0..PASSWORD_LEN)
            .map(|_| char::from(rng.sample(Alphanumeric)))
            .collect(),
        atm_url: atm_url.to_string(),
        site: site.to_string(),
    }
}

/// Job ids double as file names, so they are restricted to URL-safe
/// characters.
pub fn is_valid_job_id(job_id: &str) -> bool {
    !job_id.is_empty()
        && job_id.len() <= 128
        && job_id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Registered,
    Started,
    Progress,
    IndirectSize,
    Heartbeat,
    Finished,
    Failed,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Registered => "registered",
            EventKind::Started => "started",
            EventKind::Progress => "progress",
            EventKind::IndirectSize => "indirect_size",
            EventKind::Heartbeat => "heartbeat",
            EventKind::Finished => "finished",
            EventKind::Failed => "failed",
        };
        f.write_str(s)
    }
}

/// "completed `done` from `total` events".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Progress {
    pub done: u64,
    pub total: u64,
}

/// An event as reported by the wrapper, before the server numbers it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventReport {
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_size: Option<u64>,
    /// Wrapper-side counter used to drop duplicate deliveries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("progress event without a valid done <= total pair")]
    BadProgress,
    #[error("finished event without an exit code")]
    MissingExitCode,
    #[error("indirect_size event without a file size")]
    MissingFileSize,
}

impl EventReport {
    pub fn new(kind: EventKind) -> Self {
        Self {
            timestamp: Utc::now(),
            kind,
            progress: None,
            exit_code: None,
            raw: None,
            file_size: None,
            client_seq: None,
        }
    }

    pub fn progress(done: u64, total: u64, raw: Option<String>) -> Self {
        Self {
            progress: Some(Progress { done, total }),
            raw,
            ..Self::new(EventKind::Progress)
        }
    }

    pub fn finished(exit_code: i32) -> Self {
        Self {
            exit_code: Some(exit_code),
            ..Self::new(EventKind::Finished)
        }
    }

    pub fn failed(exit_code: Option<i32>, reason: Option<String>) -> Self {
        Self {
            exit_code,
            raw: reason,
            ..Self::new(EventKind::Failed)
        }
    }

    pub fn indirect_size(bytes: u64) -> Self {
        Self {
            file_size: Some(bytes),
            ..Self::new(EventKind::IndirectSize)
        }
    }

    pub fn validate(&self) -> Result<(), EventError> {
        match self.kind {
            EventKind::Progress => match self.progress {
                Some(p) if p.done <= p.total => Ok(()),
                _ => Err(EventError::BadProgress),
            },
            EventKind::Finished if self.exit_code.is_none() => Err(EventError::MissingExitCode),
            EventKind::IndirectSize if self.file_size.is_none() => {
                Err(EventError::MissingFileSize)
            }
            _ => Ok(()),
        }
    }

    pub fn into_event(self, job_id: &str, seq: u64) -> MonitoringEvent {
        MonitoringEvent {
            job_id: job_id.to_string(),
            seq,
            timestamp: self.timestamp,
            kind: self.kind,
            progress: self.progress,
            exit_code: self.exit_code,
            raw: self.raw,
            file_size: self.file_size,
            client_seq: self.client_seq,
        }
    }
}

/// A numbered entry of a job's status log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoringEvent {
    pub job_id: String,
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub subject: String,
    pub max_jobs: u32,
    pub registered_at: DateTime<Utc>,
    pub active_jobs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Registered,
    Running,
    Completed,
    Failed,
}

impl JobState {
    /// registered -> running -> completed|failed. A job that could not
    /// be started at all may also go straight from registered to failed.
    pub fn can_transition_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Registered, Running) | (Registered, Failed) | (Running, Completed) | (Running, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }

    pub fn is_active(self) -> bool {
        !self.is_terminal()
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::Registered => "registered",
            JobState::Running => "running",
            JobState::Completed => "completed",
            JobState::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub owner_subject: String,
    pub password_hash: PasswordDigest,
    pub site: String,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    AllowAll,
    Allowlist,
    Denylist,
}

/// Which certificate subjects a site lets register, and their default quota.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePolicy {
    pub mode: PolicyMode,
    #[serde(default)]
    pub subjects: BTreeSet<String>,
    #[serde(default = "default_max_jobs")]
    pub default_max_jobs: u32,
}

/// Shipped default for [`SitePolicy::default_max_jobs`].
pub const DEFAULT_MAX_JOBS: u32 = 100;

fn default_max_jobs() -> u32 {
    DEFAULT_MAX_JOBS
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("{0:?} policy needs at least one subject")]
    EmptySubjects(PolicyMode),
    #[error("default_max_jobs must be positive")]
    ZeroQuota,
}

impl Default for SitePolicy {
    fn default() -> Self {
        Self::allow_all()
    }
}

impl SitePolicy {
    pub fn allow_all() -> Self {
        Self {
            mode: PolicyMode::AllowAll,
            subjects: BTreeSet::new(),
            default_max_jobs: DEFAULT_MAX_JOBS,
        }
    }

    pub fn allowlist<I: IntoIterator<Item = S>, S: Into<String>>(subjects: I) -> Self {
        Self {
            mode: PolicyMode::Allowlist,
            subjects: subjects.into_iter().map(Into::into).collect(),
            default_max_jobs: DEFAULT_MAX_JOBS,
        }
    }

    pub fn denylist<I: IntoIterator<Item = S>, S: Into<String>>(subjects: I) -> Self {
        Self {
            mode: PolicyMode::Denylist,
            subjects: subjects.into_iter().map(Into::into).collect(),
            default_max_jobs: DEFAULT_MAX_JOBS,
        }
    }

    pub fn with_default_max_jobs(mut self, max_jobs: u32) -> Self {
        self.default_max_jobs = max_jobs;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.default_max_jobs == 0 {
            return Err(PolicyError::ZeroQuota);
        }
        if self.mode != PolicyMode::AllowAll && self.subjects.is_empty() {
            return Err(PolicyError::EmptySubjects(self.mode));
        }
        Ok(())
    }

    pub fn admits(&self, subject: &str) -> bool {
        match self.mode {
            PolicyMode::AllowAll => true,
            PolicyMode::Allowlist => self.subjects.contains(subject),
            PolicyMode::Denylist => !self.subjects.contains(subject),
        }
    }
}
