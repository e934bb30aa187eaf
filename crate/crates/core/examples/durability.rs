//! The file-backed store: append-only logs that survive a crash mid-write.
//!
//!     cargo run --example durability

use std::fs::OpenOptions;
use std::io::Write;

use atm::model::{hash_password, new_salt, EventReport, JobRecord, JobState, UserRecord};
use atm::store::{Durability, Store};
use chrono::Utc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = dir.path().join("store");
    {
        let store = Store::open_with(&root, Durability::Sync)?;
        store.put_user(UserRecord {
            subject: "/CN=alice".into(),
            max_jobs: 10,
            registered_at: Utc::now(),
            active_jobs: 1,
        })?;
        store.put_job(JobRecord {
            job_id: "job-1".into(),
            owner_subject: "/CN=alice".into(),
            password_hash: hash_password("secret", &new_salt(&mut rand::thread_rng())),
            site: "ce1".into(),
            state: JobState::Registered,
            created_at: Utc::now(),
        })?;
        store.transition_job("job-1", JobState::Running)?;
        for k in 1..=5 {
            let seq = store.append_event("job-1", EventReport::progress(k * 40, 200, None))?;
            println!("appended progress {}/200 as seq {seq}", k * 40);
        }
        // A second open of the same root is refused while this one lives.
        match Store::open(&root) {
            Err(e) => println!("second open: {e}"),
            Ok(_) => println!("second open unexpectedly succeeded"),
        }
    }

    // Simulate a crash halfway through writing the next event.
    let log = root.join("events/job-1.jsonl");
    OpenOptions::new().append(true).open(&log)?.write_all(b"{\"job_id\":\"job-1\",\"seq\":6,\"ki")?;
    println!("tore the tail of {}", log.display());

    let store = Store::open(&root)?;
    let events = store.read_events("job-1", 1)?;
    println!(
        "after reopen: {} events, seqs {:?}, job is {:?}",
        events.len(),
        events.iter().map(|e| e.seq).collect::<Vec<_>>(),
        store.get_job("job-1")?.state
    );
    let seq = store.append_event("job-1", EventReport::finished(0))?;
    println!("next append gets seq {seq}");
    Ok(())
}
