//! Audits who connected to whom during a grid run. Worker nodes may only
//! dial out to ATM servers; nothing may dial into a worker node. Also
//! shows the shared-password check against the old one-password scheme.
//!
//!     cargo run --example outbound_audit

use std::ffi::OsString;

use atm::gridsim::{
    audit_outbound_only, AtmServerSpec, CeNode, ConnectionRecord, JobProgram, JobSpec, Role, Scenario,
    SimOptions, TopologySpec, WnPolicy, Workload, WrapperCommand,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let argv: Vec<OsString> = std::env::args_os().collect();
    if argv.get(1).is_some_and(|a| a == "wrapper") {
        let mut args = vec![OsString::from("atm")];
        args.extend(argv.into_iter().skip(1));
        std::process::exit(atm::cli::run(args, &mut std::io::stdout(), &mut std::io::stderr()));
    }

    let mut scenario = Scenario {
        seed: 9,
        topology: TopologySpec {
            users: vec!["/CN=alice".into()],
            atm_servers: vec![AtmServerSpec {
                server_id: "atm".into(),
                policy: Default::default(),
                durability: Default::default(),
            }],
            ce_nodes: vec![CeNode { site: "ce1".into(), slots: 2 }],
            wn_policy: WnPolicy::default(),
        },
        workload: Workload {
            jobs: vec![JobSpec {
                user: "/CN=alice".into(),
                atm: "atm".into(),
                site: None,
                program: JobProgram::Progress { total: 30, step: 10, interval_ms: 50, exit_code: 0 },
                count: 4,
            }],
            retry_count: 1,
            timeout_secs: 30.0,
            legacy_shared_password: false,
            check_transparency: false,
        },
    };
    let run = |s: &Scenario| -> Result<_, Box<dyn std::error::Error>> {
        let dir = tempfile::tempdir()?;
        let options = SimOptions {
            work_dir: dir.path().to_path_buf(),
            wrapper: WrapperCommand::current_exe()?,
        };
        Ok(s.run(&options)?)
    };

    let report = run(&scenario)?;
    println!("connections by role:");
    for ((from, to), n) in report.audit.edges() {
        println!("  {from:>3} -> {to:<3} x{n}");
    }
    println!("violations: {}", audit_outbound_only(&report.audit).len());

    let mut tampered = report.audit.clone();
    tampered.records.push(ConnectionRecord::new(Role::Atm, Role::Wn, "10.1.2.3:5000"));
    tampered.records.push(ConnectionRecord::new(Role::Wn, Role::Ui, "10.1.2.4:22"));
    for v in audit_outbound_only(&tampered) {
        println!("tampered audit: {v}");
    }

    scenario.workload.legacy_shared_password = true;
    let legacy = run(&scenario)?;
    for v in &legacy.credential_violations {
        println!("shared password across {} jobs", v.job_ids.len());
    }
    Ok(())
}
