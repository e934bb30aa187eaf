//! Two-step registration: the user registers once with a certificate,
//! then gets a ticket (job id and password) for each job.
//!
//!     cargo run --example register_and_ticket

use atm::client::AtmClient;
use atm::model::{CertificateAuthority, EventKind, EventReport, SitePolicy};
use atm::server::{AtmServer, ServerConfig};
use chrono::{Duration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let ca = CertificateAuthority::generate(&mut rng);
    let (cert, key) = ca.issue("/O=Grid/CN=alice", Utc::now() + Duration::days(30), &mut rng);
    let (bad_cert, bad_key) = ca.issue("/O=Grid/CN=mallory", Utc::now() + Duration::days(30), &mut rng);

    let mut config = ServerConfig::new("atm-1", dir.path().join("store"), ca.verification_key());
    config.policy = SitePolicy::denylist(["/O=Grid/CN=mallory"]).with_default_max_jobs(2);
    let server = AtmServer::start(config)?;
    println!("server {} at {}", server.server_id(), server.url());

    let client = AtmClient::new(server.url())?;
    let reg = client.register_user(&cert, &key)?;
    println!("alice: accepted={} max_jobs={}", reg.accepted, reg.max_jobs);
    match client.register_user(&bad_cert, &bad_key) {
        Err(e) => println!("mallory: {e}"),
        Ok(r) => println!("mallory unexpectedly accepted: {r:?}"),
    }

    let ticket = client.register_job(&cert, &key, "ce1.test")?;
    // The password belongs in the job description only; don't print it.
    println!("ticket: job_id={} site={} atm={}", ticket.job_id, ticket.site, ticket.atm_url);

    let seq = client.update(&ticket.job_id, &ticket.password, &EventReport::new(EventKind::Started))?;
    println!("started event stored as seq {seq}");
    match client.update(&ticket.job_id, "guess", &EventReport::new(EventKind::Heartbeat)) {
        Err(e) => println!("wrong password: {e}"),
        Ok(_) => println!("wrong password accepted?!"),
    }

    client.register_job(&cert, &key, "ce1.test")?;
    match client.register_job(&cert, &key, "ce1.test") {
        Err(e) => println!("third job: {e}"),
        Ok(_) => println!("quota not enforced?!"),
    }
    server.shutdown()?;
    Ok(())
}
