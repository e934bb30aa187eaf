#![allow(dead_code)]

use std::path::Path;

use atm::model::{Certificate, CertificateAuthority, SitePolicy, UserKey};
use atm::server::{AtmServer, ServerConfig, ServerHandle};
use chrono::{Duration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn ca(seed: u64) -> CertificateAuthority {
    CertificateAuthority::generate(&mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn user(ca: &CertificateAuthority, subject: &str) -> (Certificate, UserKey) {
    let mut rng = ChaCha20Rng::seed_from_u64(subject.len() as u64 ^ 0x5eed);
    ca.issue(subject, Utc::now() + Duration::days(1), &mut rng)
}

pub fn config(ca: &CertificateAuthority, id: &str, root: &Path, policy: SitePolicy) -> ServerConfig {
    let mut config = ServerConfig::new(id, root.join(id), ca.verification_key());
    config.policy = policy;
    config
}

pub fn start(ca: &CertificateAuthority, id: &str, root: &Path, policy: SitePolicy) -> ServerHandle {
    AtmServer::start(config(ca, id, root, policy)).expect("server starts")
}

/// Path of the `atm` binary built for this test run.
pub fn atm_bin() -> &'static str {
    env!("CARGO_BIN_EXE_atm")
}
