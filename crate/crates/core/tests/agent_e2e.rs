mod common;

use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use atm::agent::{run_wrapped, AgentError, WrapperArgs, WrapperOptions};
use atm::client::AtmClient;
use atm::model::{EventKind, JobState, JobTicket, MonitoringEvent, SitePolicy};
use atm::server::{AtmServer, ServerHandle};

struct Fixture {
    dir: tempfile::TempDir,
    server: ServerHandle,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ca = common::ca(21);
        let server = common::start(&ca, "atm", dir.path(), SitePolicy::allow_all());
        let client = AtmClient::new(server.url()).unwrap();
        let (cert, key) = common::user(&ca, "/CN=alice");
        client.register_user(&cert, &key).unwrap();
        // Stash credentials for ticket issuing.
        std::fs::write(dir.path().join("cert.json"), serde_json::to_vec(&cert).unwrap()).unwrap();
        std::fs::write(dir.path().join("key.json"), serde_json::to_vec(&key).unwrap()).unwrap();
        Self { dir, server }
    }

    fn ticket(&self) -> JobTicket {
        let read = |f: &str| std::fs::read(self.dir.path().join(f)).unwrap();
        let cert = serde_json::from_slice(&read("cert.json")).unwrap();
        let key = serde_json::from_slice(&read("key.json")).unwrap();
        AtmClient::new(self.server.url())
            .unwrap()
            .register_job(&cert, &key, "ce1")
            .unwrap()
    }

    fn work(&self, name: &str) -> std::path::PathBuf {
        let p = self.dir.path().join(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    }

    fn events(&self, job_id: &str) -> Vec<MonitoringEvent> {
        self.server.service().store().read_events(job_id, 1).unwrap()
    }

    fn state(&self, job_id: &str) -> JobState {
        self.server.service().store().get_job(job_id).unwrap().state
    }
}

fn args(ticket: &JobTicket, work: &Path, script: &str, retry_ms: u64) -> WrapperArgs {
    WrapperArgs {
        job_id: ticket.job_id.clone(),
        password: ticket.password.clone(),
        site: ticket.site.clone(),
        atm_url: ticket.atm_url.clone(),
        command: "/bin/sh".into(),
        command_args: vec!["-c".into(), script.into()],
        retry: Duration::from_millis(retry_ms),
        stdout_path: Some(work.join("out")),
        stderr_path: Some(work.join("err")),
        watch_path: None,
    }
}

fn options(work: &Path) -> WrapperOptions {
    WrapperOptions {
        spool_dir: work.to_path_buf(),
        final_flush_timeout: Duration::from_secs(10),
        ..WrapperOptions::default()
    }
}

fn kinds(events: &[MonitoringEvent]) -> Vec<EventKind> {
    events
        .iter()
        .map(|e| e.kind)
        .filter(|k| *k != EventKind::Heartbeat)
        .collect()
}

const PROGRESS: &str = "for k in 1 2 3 4; do echo \"completed $k from 4 events\"; echo noise; sleep 0.05; done";

#[test]
fn progress_lines_become_ordered_events() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("p");
    let outcome = run_wrapped(&args(&t, &work, PROGRESS, 100), &options(&work)).unwrap();
    assert_eq!(outcome.exit_code, 0);
    assert_eq!(outcome.undelivered_events, 0);

    let events = f.events(&t.job_id);
    use EventKind::*;
    assert_eq!(kinds(&events), [Started, Progress, Progress, Progress, Progress, Finished]);
    let done: Vec<u64> = events.iter().filter_map(|e| e.progress.map(|p| p.done)).collect();
    assert_eq!(done, [1, 2, 3, 4]);
    assert_eq!(
        events.iter().find(|e| e.kind == Progress).unwrap().raw.as_deref(),
        Some("completed 1 from 4 events")
    );
    assert_eq!(events.last().unwrap().exit_code, Some(0));
    assert_eq!(f.state(&t.job_id), JobState::Completed);
    // No spool left behind after a clean delivery.
    assert!(std::fs::read_dir(&work)
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().starts_with(".atm-spool")));
}

#[test]
fn output_files_match_an_unwrapped_run() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("t");
    let script = "printf 'a\\nb'; echo e >&2; printf '\\000\\377'; exit 3";
    let outcome = run_wrapped(&args(&t, &work, script, 100), &options(&work)).unwrap();
    let direct = Command::new("/bin/sh").args(["-c", script]).output().unwrap();
    assert_eq!(outcome.exit_code, direct.status.code().unwrap());
    assert_eq!(std::fs::read(work.join("out")).unwrap(), direct.stdout);
    assert_eq!(std::fs::read(work.join("err")).unwrap(), direct.stderr);
    // A non-zero exit is still a finished job.
    assert_eq!(f.events(&t.job_id).last().unwrap().exit_code, Some(3));
    assert_eq!(f.state(&t.job_id), JobState::Completed);
}

#[test]
fn stderr_is_not_parsed_for_progress() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("e");
    let script = "echo 'completed 1 from 2 events' >&2";
    run_wrapped(&args(&t, &work, script, 100), &options(&work)).unwrap();
    assert!(f.events(&t.job_id).iter().all(|e| e.kind != EventKind::Progress));
}

#[test]
fn killed_jobs_are_reported_as_failed() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("k");
    let outcome = run_wrapped(&args(&t, &work, "kill -9 $$", 100), &options(&work)).unwrap();
    assert_eq!(outcome.exit_code, 128 + 9);
    let last = f.events(&t.job_id).pop().unwrap();
    assert_eq!(last.kind, EventKind::Failed);
    assert_eq!(last.exit_code, Some(137));
    assert_eq!(f.state(&t.job_id), JobState::Failed);
}

#[test]
fn a_missing_executable_fails_the_job() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("m");
    let mut a = args(&t, &work, "", 100);
    a.command = "/nonexistent/program".into();
    let err = run_wrapped(&a, &options(&work)).unwrap_err();
    assert!(matches!(err, AgentError::SpawnFailed { .. }));
    assert_eq!(f.state(&t.job_id), JobState::Failed);
    assert_eq!(kinds(&f.events(&t.job_id)), [EventKind::Failed]);
}

#[test]
fn quiet_cycles_send_heartbeats() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("h");
    run_wrapped(&args(&t, &work, "sleep 0.5", 50), &options(&work)).unwrap();
    let beats = f
        .events(&t.job_id)
        .iter()
        .filter(|e| e.kind == EventKind::Heartbeat)
        .count();
    assert!(beats >= 3, "only {beats} heartbeats");
}

#[test]
fn output_file_growth_is_reported() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("w");
    let data = work.join("galice.root");
    let script = format!(
        "for i in 1 2 3; do head -c 1000 /dev/zero >> {}; sleep 0.15; done",
        data.display()
    );
    let mut a = args(&t, &work, &script, 50);
    a.watch_path = Some(data);
    run_wrapped(&a, &options(&work)).unwrap();
    let sizes: Vec<u64> = f
        .events(&t.job_id)
        .iter()
        .filter(|e| e.kind == EventKind::IndirectSize)
        .map(|e| e.file_size.unwrap())
        .collect();
    assert_eq!(sizes.last(), Some(&3000));
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
}

#[test]
fn events_survive_a_server_outage() {
    let dir = tempfile::tempdir().unwrap();
    let ca = common::ca(22);
    let mut config = common::config(&ca, "atm", dir.path(), SitePolicy::allow_all());
    let server = AtmServer::start(config.clone()).unwrap();
    config.listen_address = server.addr().to_string();
    let client = AtmClient::new(server.url()).unwrap();
    let (cert, key) = common::user(&ca, "/CN=alice");
    client.register_user(&cert, &key).unwrap();
    let t = client.register_job(&cert, &key, "ce1").unwrap();
    server.shutdown().unwrap();

    let work = dir.path().join("wn");
    std::fs::create_dir_all(&work).unwrap();
    let a = args(&t, &work, PROGRESS, 50);
    let opts = options(&work);
    let wrapper = thread::spawn(move || run_wrapped(&a, &opts));

    // Let the job run (and finish) while nobody is listening.
    thread::sleep(Duration::from_millis(600));
    let server = AtmServer::start(config).unwrap();
    let outcome = wrapper.join().unwrap().unwrap();
    assert_eq!(outcome.undelivered_events, 0);

    let events = server.service().store().read_events(&t.job_id, 1).unwrap();
    use EventKind::*;
    assert_eq!(kinds(&events), [Started, Progress, Progress, Progress, Progress, Finished]);
    assert!(events.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1));
}

#[test]
fn wrapper_overhead_is_small() {
    let f = Fixture::new();
    let t = f.ticket();
    let work = f.work("o");
    let script = "sleep 1";
    let start = Instant::now();
    Command::new("/bin/sh").args(["-c", script]).status().unwrap();
    let direct = start.elapsed();
    let start = Instant::now();
    run_wrapped(&args(&t, &work, script, 1000), &options(&work)).unwrap();
    let wrapped = start.elapsed();
    assert!(
        wrapped.as_secs_f64() < direct.as_secs_f64() * 1.1,
        "{wrapped:?} vs {direct:?}"
    );
}
