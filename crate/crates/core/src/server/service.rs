use std::sync::{Arc, Mutex};

use chrono::Utc;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{
    check_password, hash_password, issue_ticket, new_salt, verify_request, CaVerificationKey,
    EventKind, EventReport, JobRecord, JobState, JobTicket, SignedRequest, SitePolicy,
    UserRecord, VerifyError,
};
use crate::protocol::{
    ApiError, JobStatus, JobView, QueryResponse, RegisterUserResponse, SignedAction,
    MAX_REQUEST_SKEW_SECS,
};
use crate::store::{Store, StoreError};

const UPDATE_STRIPES: usize = 64;

/// Credentials accepted by status queries.
#[derive(Debug, Clone)]
pub enum Credentials {
    Ticket { job_id: String, password: String },
    Signed(SignedRequest),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::NotFound,
            StoreError::IllegalTransition { from, to } => {
                ApiError::IllegalTransition(format!("{from} -> {to}"))
            }
            StoreError::InvalidJobId(id) => ApiError::BadRequest(format!("invalid job id {id:?}")),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<VerifyError> for ApiError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::BadSignature => ApiError::BadSignature,
            VerifyError::ExpiredCertificate => ApiError::ExpiredCertificate,
            VerifyError::UntrustedCA => ApiError::UntrustedCa,
        }
    }
}

/// The request handlers, independent of the transport.
pub struct AtmService {
    server_id: String,
    public_url: String,
    policy: SitePolicy,
    ca: CaVerificationKey,
    store: Arc<Store>,
    rng: Mutex<ChaCha20Rng>,
    /// Serializes job registration against quota release.
    quota: Mutex<()>,
    /// Serializes updates per job (striped by job id hash).
    update_locks: Vec<Mutex<()>>,
}

impl std::fmt::Debug for AtmService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AtmService")
            .field("server_id", &self.server_id)
            .field("public_url", &self.public_url)
            .finish_non_exhaustive()
    }
}

fn stripe(job_id: &str) -> usize {
    job_id
        .bytes()
        .fold(0usize, |h, b| h.wrapping_mul(31).wrapping_add(b as usize))
        % UPDATE_STRIPES
}

impl AtmService {
    pub fn new(
        server_id: impl Into<String>,
        public_url: impl Into<String>,
        policy: SitePolicy,
        ca: CaVerificationKey,
        store: Arc<Store>,
        rng_seed: Option<u64>,
    ) -> Result<Self, ApiError> {
        let rng = match rng_seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        let service = Self {
            server_id: server_id.into(),
            public_url: public_url.into(),
            policy,
            ca,
            store,
            rng: Mutex::new(rng),
            quota: Mutex::new(()),
            update_locks: (0..UPDATE_STRIPES).map(|_| Mutex::new(())).collect(),
        };
        service.reconcile_quotas()?;
        Ok(service)
    }

    pub fn server_id(&self) -> &str {
        &self.server_id
    }

    pub fn public_url(&self) -> &str {
        &self.public_url
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    /// Recomputes every user's active job count from the job table, which
    /// repairs counts left stale by a crash between the two writes.
    fn reconcile_quotas(&self) -> Result<(), ApiError> {
        let jobs = self.store.list_jobs();
        for user in self.store.list_users() {
            let active = jobs
                .iter()
                .filter(|j| j.owner_subject == user.subject && j.state.is_active())
                .count() as u32;
            if active != user.active_jobs {
                log::info!(
                    "{}: active job count of {} repaired {} -> {active}",
                    self.server_id,
                    user.subject,
                    user.active_jobs
                );
                self.store.put_user(UserRecord {
                    active_jobs: active,
                    ..user
                })?;
            }
        }
        Ok(())
    }

    fn authenticate(&self, request: &SignedRequest) -> Result<(String, SignedAction), ApiError> {
        let subject = verify_request(request, &self.ca, Utc::now())?;
        let action: SignedAction = serde_json::from_slice(&request.body)
            .map_err(|e| ApiError::BadRequest(format!("signed body: {e}")))?;
        let skew = (Utc::now() - action.issued_at()).num_seconds().abs();
        if skew > MAX_REQUEST_SKEW_SECS {
            return Err(ApiError::BadRequest("signed request is stale".into()));
        }
        Ok((subject, action))
    }

    pub fn handle_user_register(
        &self,
        request: &SignedRequest,
    ) -> Result<RegisterUserResponse, ApiError> {
        let (subject, action) = self.authenticate(request)?;
        if !matches!(action, SignedAction::UserRegister { .. }) {
            return Err(ApiError::BadRequest("expected a user_register body".into()));
        }
        if !self.policy.admits(&subject) {
            return Err(ApiError::PolicyRejected);
        }
        let _guard = self.quota.lock().unwrap_or_else(|e| e.into_inner());
        let user = match self.store.get_user(&subject) {
            Ok(existing) => existing,
            Err(StoreError::NotFound(_)) => {
                let user = UserRecord {
                    subject: subject.clone(),
                    max_jobs: self.policy.default_max_jobs,
                    registered_at: Utc::now(),
                    active_jobs: 0,
                };
                self.store.put_user(user.clone())?;
                log::info!("{}: registered user {subject}", self.server_id);
                user
            }
            Err(e) => return Err(e.into()),
        };
        Ok(RegisterUserResponse {
            accepted: true,
            max_jobs: user.max_jobs,
        })
    }

    pub fn handle_job_register(&self, request: &SignedRequest) -> Result<JobTicket, ApiError> {
        let (subject, action) = self.authenticate(request)?;
        let SignedAction::JobRegister { site, .. } = action else {
            return Err(ApiError::BadRequest("expected a job_register body".into()));
        };
        crate::jdl::check_token(&site).map_err(|e| ApiError::BadRequest(format!("site: {e}")))?;
        let _guard = self.quota.lock().unwrap_or_else(|e| e.into_inner());
        match self.store.try_update_user(&subject, |u| {
            if u.active_jobs >= u.max_jobs {
                return false;
            }
            u.active_jobs += 1;
            true
        }) {
            Ok(Some(_)) => {}
            Ok(None) => return Err(ApiError::QuotaExceeded),
            Err(StoreError::NotFound(_)) => return Err(ApiError::NotRegistered),
            Err(e) => return Err(e.into()),
        }

        let (ticket, salt) = {
            let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
            loop {
                let ticket = issue_ticket(&self.public_url, &site, &mut *rng);
                if self.store.get_job(&ticket.job_id).is_err() {
                    break (ticket, new_salt(&mut *rng));
                }
            }
        };
        let record = JobRecord {
            job_id: ticket.job_id.clone(),
            owner_subject: subject.clone(),
            password_hash: hash_password(&ticket.password, &salt),
            site,
            state: JobState::Registered,
            created_at: Utc::now(),
        };
        if let Err(e) = self.store.put_job(record) {
            self.release_quota(&subject)?;
            return Err(e.into());
        }
        log::info!("{}: job {} registered for {subject}", self.server_id, ticket.job_id);
        Ok(ticket)
    }

    fn release_quota(&self, subject: &str) -> Result<(), ApiError> {
        self.store.try_update_user(subject, |u| {
            u.active_jobs = u.active_jobs.saturating_sub(1);
            true
        })?;
        Ok(())
    }

    /// Looks the job up and checks its password. Every failure looks the
    /// same to the caller.
    fn check_ticket(&self, job_id: &str, password: &str) -> Result<JobRecord, ApiError> {
        let job = self.store.get_job(job_id).map_err(|_| ApiError::AuthFailed)?;
        if !check_password(password, &job.password_hash) {
            return Err(ApiError::AuthFailed);
        }
        Ok(job)
    }

    pub fn handle_job_update(
        &self,
        job_id: &str,
        password: &str,
        report: EventReport,
    ) -> Result<u64, ApiError> {
        self.check_ticket(job_id, password)?;
        report
            .validate()
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        if report.kind == EventKind::Registered {
            return Err(ApiError::BadRequest(
                "registered events are recorded by the server".into(),
            ));
        }

        let _guard = self.update_locks[stripe(job_id)]
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        if let Some(client_seq) = report.client_seq {
            if let Some(seq) = self.store.find_delivered(job_id, client_seq)? {
                return Ok(seq);
            }
        }
        let job = self.store.get_job(job_id)?;
        if job.state.is_terminal() {
            return Err(ApiError::IllegalTransition(format!(
                "job is already {}",
                job.state
            )));
        }
        let next = match report.kind {
            EventKind::Started => Some(JobState::Running),
            EventKind::Finished => Some(JobState::Completed),
            EventKind::Failed => Some(JobState::Failed),
            _ => None,
        };
        if let Some(next) = next {
            if !job.state.can_transition_to(next) {
                return Err(ApiError::IllegalTransition(format!("{} -> {next}", job.state)));
            }
        }
        let seq = self.store.append_event(job_id, report)?;
        if let Some(next) = next {
            let _quota = self.quota.lock().unwrap_or_else(|e| e.into_inner());
            self.store.transition_job(job_id, next)?;
            if next.is_terminal() {
                self.release_quota(&job.owner_subject)?;
            }
        }
        Ok(seq)
    }

    fn status_of(&self, job: &JobRecord) -> Result<JobStatus, ApiError> {
        Ok(JobStatus {
            record: JobView::from(job),
            events: self.store.read_events(&job.job_id, 1)?,
        })
    }

    pub fn handle_status_query(&self, credentials: &Credentials) -> Result<QueryResponse, ApiError> {
        let jobs = match credentials {
            Credentials::Ticket { job_id, password } => {
                vec![self.check_ticket(job_id, password)?]
            }
            Credentials::Signed(request) => {
                let (subject, action) = self.authenticate(request)?;
                let SignedAction::JobQuery { job_id, .. } = action else {
                    return Err(ApiError::BadRequest("expected a job_query body".into()));
                };
                let owned = self.store.list_jobs_by_owner(&subject);
                match job_id {
                    Some(id) => owned.into_iter().filter(|j| j.job_id == id).collect(),
                    None => owned,
                }
            }
        };
        let jobs = jobs
            .iter()
            .map(|j| self.status_of(j))
            .collect::<Result<_, _>>()?;
        Ok(QueryResponse { jobs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sign_request, Certificate, CertificateAuthority, UserKey};
    use chrono::Duration;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        _dir: tempfile::TempDir,
        ca: CertificateAuthority,
        service: AtmService,
        rng: ChaCha8Rng,
    }

    fn fixture(policy: SitePolicy) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ca = CertificateAuthority::generate(&mut rng);
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let service = AtmService::new(
            "atm-test",
            "http://atm.test",
            policy,
            ca.verification_key(),
            store,
            Some(1),
        )
        .unwrap();
        Fixture {
            _dir: dir,
            ca,
            service,
            rng,
        }
    }

    impl Fixture {
        fn user(&mut self, subject: &str) -> (Certificate, UserKey) {
            self.ca
                .issue(subject, Utc::now() + Duration::days(1), &mut self.rng)
        }
    }

    fn signed(action: SignedAction, id: &(Certificate, UserKey)) -> SignedRequest {
        sign_request(&action.to_body(), &id.1, &id.0)
    }

    fn register_user(id: &(Certificate, UserKey)) -> SignedRequest {
        signed(SignedAction::UserRegister { issued_at: Utc::now() }, id)
    }

    fn register_job(id: &(Certificate, UserKey), site: &str) -> SignedRequest {
        signed(
            SignedAction::JobRegister {
                issued_at: Utc::now(),
                site: site.into(),
            },
            id,
        )
    }

    fn query(id: &(Certificate, UserKey), job_id: Option<&str>) -> Credentials {
        Credentials::Signed(signed(
            SignedAction::JobQuery {
                issued_at: Utc::now(),
                job_id: job_id.map(str::to_string),
            },
            id,
        ))
    }

    #[test]
    fn allow_all_accepts_with_default_quota() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        let resp = f.service.handle_user_register(&register_user(&alice)).unwrap();
        assert!(resp.accepted);
        assert_eq!(resp.max_jobs, 100);
    }

    #[test]
    fn denylist_rejects() {
        let mut f = fixture(SitePolicy::denylist(["/CN=mallory"]));
        let mallory = f.user("/CN=mallory");
        assert_eq!(
            f.service.handle_user_register(&register_user(&mallory)),
            Err(ApiError::PolicyRejected)
        );
        assert!(f.service.store().list_users().is_empty());
    }

    #[test]
    fn re_registration_is_idempotent() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        f.service.handle_user_register(&register_user(&alice)).unwrap();
        let before = f.service.store().get_user("/CN=alice").unwrap();
        f.service.handle_user_register(&register_user(&alice)).unwrap();
        assert_eq!(f.service.store().get_user("/CN=alice").unwrap(), before);
        assert_eq!(f.service.store().list_users().len(), 1);
    }

    #[test]
    fn quota_and_registration_checks() {
        let mut f = fixture(SitePolicy::allow_all().with_default_max_jobs(1));
        let alice = f.user("/CN=alice");
        let bob = f.user("/CN=bob");
        assert_eq!(
            f.service.handle_job_register(&register_job(&bob, "ce")),
            Err(ApiError::NotRegistered)
        );
        f.service.handle_user_register(&register_user(&alice)).unwrap();
        let ticket = f.service.handle_job_register(&register_job(&alice, "ce")).unwrap();
        assert_eq!(ticket.site, "ce");
        assert_eq!(ticket.atm_url, "http://atm.test");
        assert_eq!(
            f.service.handle_job_register(&register_job(&alice, "ce")),
            Err(ApiError::QuotaExceeded)
        );
        let stored = f.service.store().get_job(&ticket.job_id).unwrap();
        assert!(!serde_json::to_string(&stored).unwrap().contains(&ticket.password));

        // Finishing the job frees the slot.
        let s = &f.service;
        s.handle_job_update(&ticket.job_id, &ticket.password, EventReport::new(EventKind::Started))
            .unwrap();
        s.handle_job_update(&ticket.job_id, &ticket.password, EventReport::finished(0))
            .unwrap();
        assert_eq!(s.store().get_user("/CN=alice").unwrap().active_jobs, 0);
        s.handle_job_register(&register_job(&alice, "ce")).unwrap();
    }

    #[test]
    fn updates_drive_the_state_machine() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        f.service.handle_user_register(&register_user(&alice)).unwrap();
        let t = f.service.handle_job_register(&register_job(&alice, "ce")).unwrap();
        let s = &f.service;

        assert_eq!(
            s.handle_job_update(&t.job_id, "wrong", EventReport::new(EventKind::Started)),
            Err(ApiError::AuthFailed)
        );
        assert_eq!(
            s.handle_job_update("unknown", &t.password, EventReport::new(EventKind::Started)),
            Err(ApiError::AuthFailed)
        );
        assert!(matches!(
            s.handle_job_update(&t.job_id, &t.password, EventReport::finished(0)),
            Err(ApiError::IllegalTransition(_))
        ));
        assert_eq!(
            s.handle_job_update(&t.job_id, &t.password, EventReport::new(EventKind::Started)),
            Ok(1)
        );
        assert_eq!(
            s.handle_job_update(
                &t.job_id,
                &t.password,
                EventReport::progress(20, 200, Some("completed 20 from 200 events".into()))
            ),
            Ok(2)
        );
        assert_eq!(
            s.store().get_job(&t.job_id).unwrap().state,
            JobState::Running
        );
        assert!(matches!(
            s.handle_job_update(&t.job_id, &t.password, EventReport::progress(5, 1, None)),
            Err(ApiError::BadRequest(_))
        ));
        assert_eq!(
            s.handle_job_update(&t.job_id, &t.password, EventReport::finished(0)),
            Ok(3)
        );
        assert!(matches!(
            s.handle_job_update(&t.job_id, &t.password, EventReport::new(EventKind::Heartbeat)),
            Err(ApiError::IllegalTransition(_))
        ));
    }

    #[test]
    fn spawn_failure_goes_straight_to_failed() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        f.service.handle_user_register(&register_user(&alice)).unwrap();
        let t = f.service.handle_job_register(&register_job(&alice, "ce")).unwrap();
        f.service
            .handle_job_update(&t.job_id, &t.password, EventReport::failed(None, None))
            .unwrap();
        assert_eq!(
            f.service.store().get_job(&t.job_id).unwrap().state,
            JobState::Failed
        );
    }

    #[test]
    fn redelivered_reports_are_acknowledged_once() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        f.service.handle_user_register(&register_user(&alice)).unwrap();
        let t = f.service.handle_job_register(&register_job(&alice, "ce")).unwrap();
        let mut started = EventReport::new(EventKind::Started);
        started.client_seq = Some(1);
        let s = &f.service;
        assert_eq!(s.handle_job_update(&t.job_id, &t.password, started.clone()), Ok(1));
        assert_eq!(s.handle_job_update(&t.job_id, &t.password, started), Ok(1));
        assert_eq!(s.store().read_events(&t.job_id, 1).unwrap().len(), 1);
    }

    #[test]
    fn queries_are_isolated_per_owner() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        let bob = f.user("/CN=bob");
        for id in [&alice, &bob] {
            f.service.handle_user_register(&register_user(id)).unwrap();
        }
        let a1 = f.service.handle_job_register(&register_job(&alice, "ce")).unwrap();
        let _a2 = f.service.handle_job_register(&register_job(&alice, "ce")).unwrap();
        let b1 = f.service.handle_job_register(&register_job(&bob, "ce")).unwrap();
        let s = &f.service;

        assert_eq!(s.handle_status_query(&query(&alice, None)).unwrap().jobs.len(), 2);
        assert!(s
            .handle_status_query(&query(&alice, Some(&b1.job_id)))
            .unwrap()
            .jobs
            .is_empty());
        let by_ticket = s
            .handle_status_query(&Credentials::Ticket {
                job_id: a1.job_id.clone(),
                password: a1.password.clone(),
            })
            .unwrap();
        assert_eq!(by_ticket.jobs.len(), 1);
        assert_eq!(by_ticket.jobs[0].record.job_id, a1.job_id);
        assert_eq!(
            s.handle_status_query(&Credentials::Ticket {
                job_id: b1.job_id.clone(),
                password: a1.password.clone(),
            }),
            Err(ApiError::AuthFailed)
        );
    }

    #[test]
    fn wrong_action_and_stale_bodies_are_rejected() {
        let mut f = fixture(SitePolicy::allow_all());
        let alice = f.user("/CN=alice");
        let wrong = register_job(&alice, "ce");
        assert!(matches!(
            f.service.handle_user_register(&wrong),
            Err(ApiError::BadRequest(_))
        ));
        let stale = signed(
            SignedAction::UserRegister {
                issued_at: Utc::now() - Duration::hours(2),
            },
            &alice,
        );
        assert!(matches!(
            f.service.handle_user_register(&stale),
            Err(ApiError::BadRequest(_))
        ));
    }

    #[test]
    fn reopening_repairs_active_counts() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store
                .put_user(UserRecord {
                    subject: "/CN=a".into(),
                    max_jobs: 3,
                    registered_at: Utc::now(),
                    active_jobs: 2,
                })
                .unwrap();
        }
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let ca = CertificateAuthority::generate(&mut ChaCha8Rng::seed_from_u64(0));
        let s = AtmService::new("x", "http://x", SitePolicy::allow_all(), ca.verification_key(), store, None)
            .unwrap();
        assert_eq!(s.store().get_user("/CN=a").unwrap().active_jobs, 0);
    }
}
