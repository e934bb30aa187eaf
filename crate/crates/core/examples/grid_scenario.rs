//! Runs a scenario file through the simulated grid: UI, broker, CEs and
//! worker-node subprocesses that run this very example as their wrapper.
//!
//!     cargo run --example grid_scenario [scenario.json] [--seed N]

use std::ffi::OsString;
use std::path::PathBuf;

use atm::gridsim::{Scenario, SimOptions, WrapperCommand};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Worker nodes start `<this exe> wrapper ...`; hand those to the CLI.
    let argv: Vec<OsString> = std::env::args_os().collect();
    if argv.get(1).is_some_and(|a| a == "wrapper") {
        let mut args = vec![OsString::from("atm")];
        args.extend(argv.into_iter().skip(1));
        let code = atm::cli::run(args, &mut std::io::stdout(), &mut std::io::stderr());
        std::process::exit(code);
    }

    let mut path = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/three-users-two-servers.json"));
    let mut seed = None;
    let mut rest = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    while let Some(arg) = rest.next() {
        match arg.as_str() {
            "--seed" => seed = Some(rest.next().ok_or("--seed needs a value")?.parse()?),
            _ => path = PathBuf::from(arg),
        }
    }
    let mut scenario = Scenario::load(&path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }

    let dir = tempfile::tempdir()?;
    let options = SimOptions {
        work_dir: dir.path().to_path_buf(),
        wrapper: WrapperCommand::current_exe()?,
    };
    let report = scenario.run(&options)?;
    for o in &report.outcomes {
        let progress = o.last_progress.map_or("-".to_string(), |p| format!("{}/{}", p.done, p.total));
        println!(
            "job {:>2} {:<18} on {:<6} at {:<9} exit {:?} progress {progress:<8} events {:>2} transparent {:?}",
            o.index,
            o.user,
            o.server_id,
            o.site.as_deref().unwrap_or("-"),
            o.exit_code,
            o.progress_events,
            o.transparent,
        );
    }
    println!(
        "{} jobs in {} ms; conservation {}; {} outbound violations",
        report.outcomes.len(),
        report.elapsed_ms,
        report.conservation_holds(),
        report.outbound_violations.len()
    );
    for q in &report.user_queries {
        println!("{} sees {} jobs on {}", q.subject, q.job_ids.len(), q.server_id);
    }
    Ok(())
}
