//! Several independent ATM servers. Each job names its server in the
//! ticket, so users can spread jobs over as many servers as they like.
//!
//!     cargo run --example multi_server

use atm::client::AtmClient;
use atm::model::{CertificateAuthority, EventReport};
use atm::server::{AtmServer, ServerConfig};
use chrono::{Duration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let ca = CertificateAuthority::generate(&mut rng);
    let (cert, key) = ca.issue("/CN=alice", Utc::now() + Duration::days(1), &mut rng);

    let servers = ["atm-cern", "atm-jinr", "atm-local"]
        .into_iter()
        .map(|id| AtmServer::start(ServerConfig::new(id, dir.path().join(id), ca.verification_key())))
        .collect::<Result<Vec<_>, _>>()?;
    let clients = servers
        .iter()
        .map(|s| AtmClient::new(s.url()))
        .collect::<Result<Vec<_>, _>>()?;
    for (s, c) in servers.iter().zip(&clients) {
        let health = c.health()?;
        c.register_user(&cert, &key)?;
        println!("{} at {} (healthz says {})", s.server_id(), s.url(), health.server_id);
    }

    // Seven jobs, round-robin over the servers.
    for i in 0..7 {
        let c = &clients[i % clients.len()];
        let t = c.register_job(&cert, &key, "ce1")?;
        c.update(&t.job_id, &t.password, &EventReport::progress(i as u64, 7, None))?;
        println!("job {i} -> {} ({})", t.atm_url, t.job_id);
    }

    // Each server knows only its own jobs.
    for (s, c) in servers.iter().zip(&clients) {
        let mine = c.query(&cert, &key, None)?;
        println!("{} holds {} of alice's jobs", s.server_id(), mine.jobs.len());
    }
    for s in servers {
        s.shutdown()?;
    }
    Ok(())
}
