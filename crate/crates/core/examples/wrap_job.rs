//! Runs a command under the job wrapper and prints what the server saw.
//!
//!     cargo run --example wrap_job -- [shell command]

use std::time::Duration;

use atm::agent::{run_wrapped, WrapperArgs, WrapperOptions};
use atm::client::AtmClient;
use atm::model::{CertificateAuthority, SitePolicy};
use atm::server::{AtmServer, ServerConfig};
use chrono::Utc;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const DEFAULT: &str = "for k in 20 40 60 80 100; do echo \"completed $k from 100 events\"; sleep 0.2; done; \
                       echo some diagnostics >&2";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let script = std::env::args().skip(1).collect::<Vec<_>>().join(" ");
    let script = if script.is_empty() { DEFAULT.to_string() } else { script };

    let dir = tempfile::tempdir()?;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let ca = CertificateAuthority::generate(&mut rng);
    let (cert, key) = ca.issue("/CN=alice", Utc::now() + chrono::Duration::days(1), &mut rng);
    let mut config = ServerConfig::new("atm", dir.path().join("store"), ca.verification_key());
    config.policy = SitePolicy::allow_all();
    let server = AtmServer::start(config)?;
    let client = AtmClient::new(server.url())?;
    client.register_user(&cert, &key)?;
    let ticket = client.register_job(&cert, &key, "ce1")?;

    let work = dir.path().join("wn");
    std::fs::create_dir_all(&work)?;
    let args = WrapperArgs {
        job_id: ticket.job_id.clone(),
        password: ticket.password.clone(),
        site: ticket.site.clone(),
        atm_url: ticket.atm_url.clone(),
        command: "/bin/sh".into(),
        command_args: vec!["-c".into(), script],
        retry: Duration::from_millis(300),
        stdout_path: Some(work.join("job.out")),
        stderr_path: Some(work.join("job.err")),
        watch_path: None,
    };
    let options = WrapperOptions {
        spool_dir: work.clone(),
        ..WrapperOptions::default()
    };
    let outcome = run_wrapped(&args, &options)?;
    println!(
        "exit {} ({} events delivered, {} undelivered)",
        outcome.exit_code, outcome.delivered_events, outcome.undelivered_events
    );
    print!("job.out:\n{}", std::fs::read_to_string(work.join("job.out"))?);
    print!("job.err:\n{}", std::fs::read_to_string(work.join("job.err"))?);

    println!("events on the server:");
    for e in server.service().store().read_events(&ticket.job_id, 1)? {
        let detail = match (e.progress, e.exit_code) {
            (Some(p), _) => format!("{}/{}", p.done, p.total),
            (None, Some(code)) => format!("exit {code}"),
            _ => String::new(),
        };
        println!("  #{:<3} {:<10} {detail}", e.seq, format!("{:?}", e.kind).to_lowercase());
    }
    server.shutdown()?;
    Ok(())
}
