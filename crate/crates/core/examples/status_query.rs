//! Read-only status queries: by ticket, or by certificate for every job
//! the owner has.
//!
//!     cargo run --example status_query

use atm::cli::write_table;
use atm::client::AtmClient;
use atm::model::{CertificateAuthority, EventKind, EventReport};
use atm::server::{AtmServer, ServerConfig};
use chrono::{Duration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let ca = CertificateAuthority::generate(&mut rng);
    let (alice, alice_key) = ca.issue("/CN=alice", Utc::now() + Duration::days(1), &mut rng);
    let (bob, bob_key) = ca.issue("/CN=bob", Utc::now() + Duration::days(1), &mut rng);
    let server = AtmServer::start(ServerConfig::new("atm", dir.path().join("store"), ca.verification_key()))?;
    let client = AtmClient::new(server.url())?;
    client.register_user(&alice, &alice_key)?;
    client.register_user(&bob, &bob_key)?;

    // Alice has three jobs in different states, Bob has one.
    let mut tickets = Vec::new();
    for (site, done) in [("ce1", 0), ("ce1", 120), ("ce2", 200)] {
        let t = client.register_job(&alice, &alice_key, site)?;
        if done > 0 {
            client.update(&t.job_id, &t.password, &EventReport::new(EventKind::Started))?;
            client.update(&t.job_id, &t.password, &EventReport::progress(done, 200, None))?;
        }
        if done == 200 {
            client.update(&t.job_id, &t.password, &EventReport::finished(0))?;
        }
        tickets.push(t);
    }
    let bobs = client.register_job(&bob, &bob_key, "ce2")?;

    println!("by ticket:");
    write_table(&client.status(&tickets[1].job_id, &tickets[1].password)?, &mut std::io::stdout())?;

    println!("\nalice, by certificate:");
    write_table(&client.query(&alice, &alice_key, None)?, &mut std::io::stdout())?;

    println!("\nalice asking for bob's job:");
    let peek = client.query(&alice, &alice_key, Some(&bobs.job_id))?;
    println!("{} jobs returned", peek.jobs.len());

    println!("\nraw JSON, as `atm job-status --format json` prints it:");
    let raw = client.status_raw(&tickets[2].job_id, &tickets[2].password)?;
    println!("{}", String::from_utf8_lossy(&raw.body));
    server.shutdown()?;
    Ok(())
}
