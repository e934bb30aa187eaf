//! JSON bodies exchanged between the ATM server and its clients.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EventReport, JobRecord, JobState, MonitoringEvent};

pub const USER_REGISTER: &str = "/api/v1/user/register";
pub const JOB_REGISTER: &str = "/api/v1/job/register";
pub const JOB_UPDATE: &str = "/api/v1/job/update";
pub const JOB_STATUS: &str = "/api/v1/job/status";
pub const JOB_QUERY: &str = "/api/v1/job/query";
pub const HEALTHZ: &str = "/api/v1/healthz";

/// How far a signed body's `issued_at` may drift from the server clock.
pub const MAX_REQUEST_SKEW_SECS: i64 = 600;

/// The content signed inside a `SignedRequest` envelope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SignedAction {
    UserRegister {
        issued_at: DateTime<Utc>,
    },
    JobRegister {
        issued_at: DateTime<Utc>,
        site: String,
    },
    JobQuery {
        issued_at: DateTime<Utc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        job_id: Option<String>,
    },
}

impl SignedAction {
    pub fn issued_at(&self) -> DateTime<Utc> {
        match self {
            SignedAction::UserRegister { issued_at }
            | SignedAction::JobRegister { issued_at, .. }
            | SignedAction::JobQuery { issued_at, .. } => *issued_at,
        }
    }

    pub fn to_body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("actions serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterUserResponse {
    pub accepted: bool,
    pub max_jobs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateRequest {
    pub job_id: String,
    pub password: String,
    pub event: EventReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateResponse {
    pub seq: u64,
}

/// A job record as shown to its owner (no password digest).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub owner_subject: String,
    pub site: String,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
}

impl From<&JobRecord> for JobView {
    fn from(r: &JobRecord) -> Self {
        Self {
            job_id: r.job_id.clone(),
            owner_subject: r.owner_subject.clone(),
            site: r.site.clone(),
            state: r.state,
            created_at: r.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub record: JobView,
    pub events: Vec<MonitoringEvent>,
}

impl JobStatus {
    /// The most recent (done, total) pair, if any progress was reported.
    pub fn last_progress(&self) -> Option<(u64, u64)> {
        self.events
            .iter()
            .rev()
            .find_map(|e| e.progress.map(|p| (p.done, p.total)))
    }

    pub fn last_event_time(&self) -> Option<DateTime<Utc>> {
        self.events.last().map(|e| e.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub jobs: Vec<JobStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub server_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Errors a request can end in, with their HTTP status and wire code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("bad signature")]
    BadSignature,
    #[error("certificate expired")]
    ExpiredCertificate,
    #[error("certificate not issued by a trusted CA")]
    UntrustedCa,
    #[error("registration rejected by site policy")]
    PolicyRejected,
    #[error("user is not registered")]
    NotRegistered,
    #[error("not found")]
    NotFound,
    #[error("job quota exceeded")]
    QuotaExceeded,
    #[error("illegal job state transition: {0}")]
    IllegalTransition(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::AuthFailed
            | ApiError::BadSignature
            | ApiError::ExpiredCertificate
            | ApiError::UntrustedCa => 401,
            ApiError::PolicyRejected | ApiError::NotRegistered => 403,
            ApiError::NotFound => 404,
            ApiError::QuotaExceeded | ApiError::IllegalTransition(_) => 409,
            ApiError::BadRequest(_) => 400,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::AuthFailed => "auth_failed",
            ApiError::BadSignature => "bad_signature",
            ApiError::ExpiredCertificate => "expired_certificate",
            ApiError::UntrustedCa => "untrusted_ca",
            ApiError::PolicyRejected => "policy_rejected",
            ApiError::NotRegistered => "not_registered",
            ApiError::NotFound => "not_found",
            ApiError::QuotaExceeded => "quota_exceeded",
            ApiError::IllegalTransition(_) => "illegal_transition",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn to_body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }

    pub fn from_body(body: &ErrorBody) -> Self {
        let detail = || {
            body.message
                .split_once(": ")
                .map_or_else(|| body.message.clone(), |(_, d)| d.to_string())
        };
        match body.code.as_str() {
            "auth_failed" => ApiError::AuthFailed,
            "bad_signature" => ApiError::BadSignature,
            "expired_certificate" => ApiError::ExpiredCertificate,
            "untrusted_ca" => ApiError::UntrustedCa,
            "policy_rejected" => ApiError::PolicyRejected,
            "not_registered" => ApiError::NotRegistered,
            "not_found" => ApiError::NotFound,
            "quota_exceeded" => ApiError::QuotaExceeded,
            "illegal_transition" => ApiError::IllegalTransition(detail()),
            "bad_request" => ApiError::BadRequest(detail()),
            _ => ApiError::Internal(detail()),
        }
    }
}
