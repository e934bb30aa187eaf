//! Rewrites an ordinary job description for monitoring and decodes it back.
//!
//!     cargo run --example jdl_rewrite [path/to/job.jdl]

use atm::jdl::{parse_jdl, rewrite_for_monitoring, validate_monitoring_jdl, RewriteParams, WrappedArguments};

const ALIROOT: &str = r#"Executable = "/bin/sh";
StdOutput = "aliroot.out";
StdError = "aliroot.err";
InputSandbox = {"start_aliroot2.sh","rootrc","grun2.C","Confiig.C"};
OutputSandbox = {"aliroot.err","alirot.out","galice.root"};
Arguments = "start_aliroot.sh 3.02.04 3.07.01";
Requirements = Member(other.RunTimeEnvironment,"ALICE-3.07.01");
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => ALIROOT.to_string(),
    };
    let original = parse_jdl(&text)?;
    println!("--- original ---\n{}", original.render());

    let params = RewriteParams::new("123", "567", "test.domain", "http://atm.test:8080").with_retry_count(10);
    let wrapped = rewrite_for_monitoring(&original, &params)?;
    println!("--- wrapped ---\n{}", wrapped.render());

    let violations = validate_monitoring_jdl(&wrapped);
    println!("validation: {}", if violations.is_empty() { "ok".to_string() } else { format!("{violations:?}") });

    // The worker node recovers the original command from Arguments.
    let tokens = wrapped.get("Arguments").and_then(|v| v.as_tokens()).unwrap_or_default();
    let decoded = WrappedArguments::from_tokens(tokens).map_err(|v| format!("{v:?}"))?;
    println!("job {} at {} runs: {} {}", decoded.job_id, decoded.site, decoded.executable, decoded.args.join(" "));

    // A second rewrite is refused rather than nesting wrappers.
    println!("rewrite again: {}", rewrite_for_monitoring(&wrapped, &params).unwrap_err());
    Ok(())
}
