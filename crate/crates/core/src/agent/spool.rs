use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::client::{AtmClient, ClientError};
use crate::model::EventReport;

/// Delivers events in order, keeping undelivered ones in a JSON-lines
/// spool file so that a server outage never loses them.
pub(crate) struct Pusher {
    client: AtmClient,
    job_id: String,
    password: String,
    pending: VecDeque<EventReport>,
    next_client_seq: u64,
    spool_path: PathBuf,
    delivered: u64,
    dropped: u64,
}

pub(crate) fn spool_path(dir: &Path, job_id: &str) -> PathBuf {
    dir.join(format!(".atm-spool-{job_id}.jsonl"))
}

impl Pusher {
    pub fn new(client: AtmClient, job_id: &str, password: &str, spool_dir: &Path) -> Self {
        let spool_path = spool_path(spool_dir, job_id);
        let pending: VecDeque<EventReport> = read_spool(&spool_path).unwrap_or_default().into();
        let next_client_seq = pending
            .iter()
            .filter_map(|e| e.client_seq)
            .max()
            .map_or(1, |s| s + 1);
        if !pending.is_empty() {
            log::info!("resuming {} spooled events", pending.len());
        }
        Self {
            client,
            job_id: job_id.to_string(),
            password: password.to_string(),
            pending,
            next_client_seq,
            spool_path,
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn enqueue(&mut self, mut event: EventReport) {
        event.client_seq = Some(self.next_client_seq);
        self.next_client_seq += 1;
        self.pending.push_back(event);
    }

    /// Sends pending events in order until one fails in transit.
    /// Returns true when nothing is left.
    pub fn flush(&mut self) -> bool {
        while let Some(event) = self.pending.front() {
            match self.client.update(&self.job_id, &self.password, event) {
                Ok(_) => {
                    self.delivered += 1;
                    self.pending.pop_front();
                }
                Err(e) if retryable(&e) => {
                    log::warn!("monitoring update deferred: {e}");
                    break;
                }
                Err(e) => {
                    // The server will never accept this one; keep going.
                    log::warn!("monitoring update rejected, dropping {}: {e}", event.kind);
                    self.dropped += 1;
                    self.pending.pop_front();
                }
            }
        }
        if let Err(e) = self.save() {
            log::warn!("cannot write spool {}: {e}", self.spool_path.display());
        }
        self.pending.is_empty()
    }

    /// Keeps flushing until the queue drains or `timeout` passes.
    pub fn drain(&mut self, timeout: Duration, retry_every: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.flush() {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                log::warn!(
                    "{} monitoring events left in {}",
                    self.pending.len(),
                    self.spool_path.display()
                );
                return false;
            }
            std::thread::sleep(retry_every.min(deadline - now));
        }
    }

    fn save(&self) -> io::Result<()> {
        if self.pending.is_empty() {
            return match fs::remove_file(&self.spool_path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            };
        }
        let tmp = self.spool_path.with_extension("tmp");
        let mut file = fs::File::create(&tmp)?;
        for event in &self.pending {
            serde_json::to_writer(&mut file, event)?;
            file.write_all(b"\n")?;
        }
        file.sync_data()?;
        fs::rename(tmp, &self.spool_path)
    }
}

fn retryable(e: &ClientError) -> bool {
    e.is_transport() || e.status().is_some_and(|s| s >= 500)
}

fn read_spool(path: &Path) -> io::Result<Vec<EventReport>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(event) => out.push(event),
            Err(e) => log::warn!("skipping bad spool line: {e}"),
        }
    }
    Ok(out)
}
