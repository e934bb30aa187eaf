//! The `atm` command line.
//!
//! One binary carries every tool as a subcommand. Invoked through a link
//! named `atm-<tool>` (for example `atm-job-register` or `atm-wrapper`) it
//! behaves as that tool directly.
//!
//! Exit codes: 0 ok, 1 other failure, 2 usage, 3 policy, 4 quota, 5 auth,
//! 6 transport. A job's password is written only into the rewritten job
//! description; it never appears on standard output or standard error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration as ChronoDuration, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::agent::{run_wrapped, AgentError, WrapperArgs, WrapperOptions};
use crate::client::{decode_response, AtmClient, ClientError, HttpResponse};
use crate::gridsim::{AuditedDialer, FileAuditSink, Scenario, SimOptions, WrapperCommand};
use crate::jdl::{parse_jdl, rewrite_for_monitoring, validate_monitoring_jdl, RewriteParams, DEFAULT_RETRY_COUNT};
use crate::model::{Certificate, CertificateAuthority, UserKey};
use crate::protocol::{ApiError, QueryResponse};
use crate::server::{AtmServer, ServerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_POLICY: i32 = 3;
pub const EXIT_QUOTA: i32 = 4;
pub const EXIT_AUTH: i32 = 5;
pub const EXIT_TRANSPORT: i32 = 6;

/// Exit code the wrapper uses when the job cannot be started at all.
pub const EXIT_SPAWN_FAILED: i32 = 127;

#[derive(Debug, Parser)]
#[command(name = "atm", version, about = "Application job monitoring for batch grids")]
struct Cli {
    #[command(subcommand)]
    tool: Tool,
}

#[derive(Debug, Subcommand)]
enum Tool {
    /// Ask an ATM server to admit the certificate's subject.
    UserRegister(UserRegisterArgs),
    /// Register a job and write its description rewritten for monitoring.
    JobRegister(JobRegisterArgs),
    /// Show monitoring status by ticket or by certificate.
    JobStatus(JobStatusArgs),
    /// Run an ATM server until SIGTERM or SIGINT.
    Server(ServerArgs),
    /// Run a job under monitoring (worker node side).
    ///
    /// Usage: atm wrapper -id=ID -password=PW -site=SITE -atm=URL
    /// [-retry=SECS] [-stdout=FILE] [-stderr=FILE] [-watch=FILE] -- COMMAND [ARGS..]
    Wrapper {
        #[arg(allow_hyphen_values = true, trailing_var_arg = true, num_args = 0..)]
        args: Vec<String>,
    },
    /// Grid simulator.
    #[command(subcommand)]
    Sim(SimTool),
    /// Create a mock certificate authority.
    CaInit(CaInitArgs),
    /// Issue a user certificate and key from a mock certificate authority.
    CaIssue(CaIssueArgs),
}

#[derive(Debug, Args)]
struct Endpoint {
    /// ATM server URL.
    #[arg(long, env = "ATM_URL")]
    atm: String,
}

#[derive(Debug, Args)]
struct Identity {
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    key: PathBuf,
}

#[derive(Debug, Args)]
struct UserRegisterArgs {
    #[command(flatten)]
    endpoint: Endpoint,
    #[command(flatten)]
    identity: Identity,
}

#[derive(Debug, Args)]
struct JobRegisterArgs {
    #[command(flatten)]
    endpoint: Endpoint,
    #[command(flatten)]
    identity: Identity,
    /// Site the job will run at (`*` for any).
    #[arg(long)]
    site: String,
    /// Job description to rewrite.
    #[arg(long)]
    jdl: PathBuf,
    /// Where the rewritten job description goes.
    #[arg(long)]
    out: PathBuf,
    /// Monitoring period written as RetryCount, in seconds.
    #[arg(long, default_value_t = DEFAULT_RETRY_COUNT)]
    retry_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
struct JobStatusArgs {
    #[command(flatten)]
    endpoint: Endpoint,
    #[arg(long)]
    job: Option<String>,
    #[arg(long)]
    password: Option<String>,
    #[arg(long, requires = "key")]
    cert: Option<PathBuf>,
    #[arg(long, requires = "cert")]
    key: Option<PathBuf>,
    /// With a certificate: every job the subject owns.
    #[arg(long, conflicts_with = "job")]
    all: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Debug, Args)]
struct ServerArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum SimTool {
    /// Run a scenario file through the simulated grid.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Empty directory for stores and worker nodes (default: a new
        /// directory under the system temp dir).
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CaInitArgs {
    /// Secret CA file.
    #[arg(long)]
    out: PathBuf,
    /// Verification key for server configs.
    #[arg(long)]
    verification_key: PathBuf,
}

#[derive(Debug, Args)]
struct CaIssueArgs {
    #[arg(long)]
    ca: PathBuf,
    #[arg(long)]
    subject: String,
    #[arg(long, default_value_t = 365)]
    days: i64,
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    key: PathBuf,
}

/// A failed command: message for stderr plus exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match &e {
            ClientError::BadUrl(_) => EXIT_USAGE,
            ClientError::Transport(_) | ClientError::Protocol(_) => EXIT_TRANSPORT,
            ClientError::Api { error, .. } => exit_code_for(error),
        };
        Self::new(code, e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

/// Exit code for a server-side refusal.
pub fn exit_code_for(error: &ApiError) -> i32 {
    match error {
        ApiError::PolicyRejected | ApiError::NotRegistered => EXIT_POLICY,
        ApiError::QuotaExceeded => EXIT_QUOTA,
        ApiError::AuthFailed
        | ApiError::BadSignature
        | ApiError::ExpiredCertificate
        | ApiError::UntrustedCa => EXIT_AUTH,
        ApiError::BadRequest(_) => EXIT_USAGE,
        ApiError::NotFound | ApiError::IllegalTransition(_) | ApiError::Internal(_) => EXIT_FAILURE,
    }
}

type Outcome = Result<i32, Failure>;

/// Runs the process's own command line, honouring `atm-<tool>` names.
pub fn main_from_env() -> i32 {
    let args: Vec<OsString> = std::env::args_os().collect();
    // Unlocked handles: the wrapper's copy threads write to stdout too.
    run(args, &mut io::stdout(), &mut io::stderr())
}

/// Runs one command line. `args[0]` is the program name; a name of the
/// form `atm-<tool>` selects that tool.
pub fn run(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = expand_multicall(args);
    // The wrapper's single-dash flags are not clap syntax; hand them over raw.
    if args.get(1).is_some_and(|a| a == "wrapper") {
        let rest: Vec<String> = args[2..]
            .iter()
            .map(|a| a.to_string_lossy().into_owned())
            .collect();
        return finish(wrapper(&rest), err);
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.tool {
        Tool::UserRegister(a) => user_register(&a, out),
        Tool::JobRegister(a) => job_register(&a, out),
        Tool::JobStatus(a) => job_status(&a, out),
        Tool::Server(a) => server(&a, out),
        Tool::Wrapper { args } => wrapper(&args),
        Tool::Sim(SimTool::Run {
            scenario,
            seed,
            report,
            work_dir,
        }) => sim_run(&scenario, seed, report.as_deref(), work_dir, out),
        Tool::CaInit(a) => ca_init(&a, out),
        Tool::CaIssue(a) => ca_issue(&a, out),
    };
    finish(result, err)
}

fn finish(result: Outcome, err: &mut dyn Write) -> i32 {
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "atm: {}", f.message);
            f.code
        }
    }
}

fn expand_multicall(mut args: Vec<OsString>) -> Vec<OsString> {
    let tool = args
        .first()
        .and_then(|a| Path::new(a).file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("atm-"))
        .map(str::to_string);
    if let Some(tool) = tool {
        args[0] = "atm".into();
        args.insert(1, tool.into());
    }
    args
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{what} {} does not parse: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("values serialize");
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display())))
}

fn load_identity(identity: &Identity) -> Result<(Certificate, UserKey), Failure> {
    Ok((
        read_json(&identity.cert, "certificate")?,
        read_json(&identity.key, "key")?,
    ))
}

fn client(endpoint: &Endpoint) -> Result<AtmClient, Failure> {
    Ok(AtmClient::new(&endpoint.atm)?)
}

fn user_register(a: &UserRegisterArgs, out: &mut dyn Write) -> Outcome {
    let (cert, key) = load_identity(&a.identity)?;
    let response = client(&a.endpoint)?.register_user(&cert, &key)?;
    if response.accepted {
        writeln!(out, "accepted, max_jobs={}", response.max_jobs)?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "rejected")?;
        Ok(EXIT_POLICY)
    }
}

fn job_register(a: &JobRegisterArgs, out: &mut dyn Write) -> Outcome {
    let (cert, key) = load_identity(&a.identity)?;
    let text = fs::read_to_string(&a.jdl)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", a.jdl.display())))?;
    let original = parse_jdl(&text).map_err(|e| Failure::usage(format!("{}: {e}", a.jdl.display())))?;
    if validate_monitoring_jdl(&original).is_empty() {
        return Err(Failure::usage(format!("{} is already wrapped", a.jdl.display())));
    }
    if a.retry_count == 0 {
        return Err(Failure::usage("--retry-count must be at least 1"));
    }
    // Catch rewrite problems before a ticket (and a quota slot) is spent.
    let probe = RewriteParams::new("probe", "probe", &a.site, &a.endpoint.atm);
    rewrite_for_monitoring(&original, &probe)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.jdl.display())))?;

    let ticket = client(&a.endpoint)?.register_job(&cert, &key, &a.site)?;
    let params = RewriteParams::new(&ticket.job_id, &ticket.password, &ticket.site, &ticket.atm_url)
        .with_retry_count(a.retry_count);
    let rewritten = rewrite_for_monitoring(&original, &params)
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    fs::write(&a.out, rewritten.render())
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", a.out.display())))?;
    writeln!(out, "{}", ticket.job_id)?;
    Ok(EXIT_OK)
}

fn job_status(a: &JobStatusArgs, out: &mut dyn Write) -> Outcome {
    let c = client(&a.endpoint)?;
    let response: HttpResponse = match (&a.cert, &a.key, &a.job, &a.password) {
        (Some(cert), Some(key), job, None) => {
            if job.is_none() && !a.all {
                return Err(Failure::usage("with --cert, give --job <id> or --all"));
            }
            let (cert, key) = load_identity(&Identity {
                cert: cert.clone(),
                key: key.clone(),
            })?;
            c.query_raw(&cert, &key, job.as_deref())?
        }
        (None, None, Some(job), Some(password)) => c.status_raw(job, password)?,
        _ => {
            return Err(Failure::usage(
                "give either --job and --password, or --cert and --key",
            ))
        }
    };
    let parsed: QueryResponse = decode_response(&response)?;
    match a.format {
        Format::Json => {
            out.write_all(response.body.trim_ascii_end())?;
            writeln!(out)?;
        }
        Format::Table => write_table(&parsed, out)?,
    }
    Ok(EXIT_OK)
}

/// One row per job: id, state, site, last progress and last event time.
pub fn write_table(response: &QueryResponse, out: &mut dyn Write) -> io::Result<()> {
    let rows: Vec<[String; 5]> = response
        .jobs
        .iter()
        .map(|j| {
            [
                j.record.job_id.clone(),
                format!("{:?}", j.record.state).to_lowercase(),
                j.record.site.clone(),
                j.last_progress()
                    .map_or_else(|| "-".to_string(), |(d, t)| format!("{d}/{t}")),
                j.last_event_time()
                    .map_or_else(|| "-".to_string(), |t| t.format("%Y-%m-%d %H:%M:%S").to_string()),
            ]
        })
        .collect();
    let header = ["JOB_ID", "STATE", "SITE", "PROGRESS", "LAST_EVENT"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 5]| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(out, "{}", line(header))?;
    for row in &rows {
        writeln!(out, "{}", line(row.each_ref().map(String::as_str)))?;
    }
    Ok(())
}

fn server(a: &ServerArgs, out: &mut dyn Write) -> Outcome {
    let config = ServerConfig::load(&a.config).map_err(|e| Failure::usage(e.to_string()))?;
    let handle = AtmServer::start_with_signals(config)
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    writeln!(out, "atm server {} listening on {}", handle.server_id(), handle.url())?;
    out.flush()?;
    handle.wait()?;
    Ok(EXIT_OK)
}

fn wrapper(args: &[String]) -> Outcome {
    let parsed = WrapperArgs::from_cli_args(args).map_err(|e| Failure::usage(e.to_string()))?;
    let mut options = WrapperOptions::default();
    if let Some(sink) = FileAuditSink::from_env() {
        options.dialer = Arc::new(AuditedDialer::to_file(sink));
    }
    match run_wrapped(&parsed, &options) {
        Ok(outcome) => {
            if outcome.undelivered_events > 0 {
                log::warn!("{} monitoring events were not delivered", outcome.undelivered_events);
            }
            Ok(outcome.exit_code)
        }
        Err(e @ AgentError::SpawnFailed { .. }) => Err(Failure::new(EXIT_SPAWN_FAILED, e.to_string())),
        Err(AgentError::Client(e)) => Err(e.into()),
        Err(e) => Err(Failure::new(EXIT_FAILURE, e.to_string())),
    }
}

fn sim_run(
    scenario: &Path,
    seed: Option<u64>,
    report: Option<&Path>,
    work_dir: Option<PathBuf>,
    out: &mut dyn Write,
) -> Outcome {
    let mut scenario = Scenario::load(scenario).map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let work_dir = work_dir.unwrap_or_else(|| {
        std::env::temp_dir().join(format!(
            "atm-sim-{}-{}",
            std::process::id(),
            Utc::now().timestamp_micros()
        ))
    });
    let options = SimOptions {
        work_dir: work_dir.clone(),
        wrapper: WrapperCommand::current_exe()?,
    };
    let result = scenario
        .run(&options)
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    writeln!(out, "work dir: {}", work_dir.display())?;
    for o in &result.outcomes {
        let progress = o
            .last_progress
            .map_or_else(|| "-".to_string(), |p| format!("{}/{}", p.done, p.total));
        writeln!(
            out,
            "job {:>3} {} user={} atm={} site={} exit={} state={} progress={} events={}{}",
            o.index,
            o.job_id.as_deref().unwrap_or("-"),
            o.user,
            o.server_id,
            o.site.as_deref().unwrap_or("-"),
            o.exit_code.map_or_else(|| "-".to_string(), |c| c.to_string()),
            o.state.map_or_else(|| "-".to_string(), |s| format!("{s:?}").to_lowercase()),
            progress,
            o.progress_events,
            o.error.as_ref().map_or_else(String::new, |e| format!(" error={e}")),
        )?;
    }
    for v in &result.outbound_violations {
        writeln!(out, "violation: {v}")?;
    }
    for v in &result.credential_violations {
        writeln!(out, "violation: {v}")?;
    }
    writeln!(
        out,
        "{} jobs, {} connects, {} violations, conservation {}, {} ms",
        result.outcomes.len(),
        result.audit.records.len(),
        result.outbound_violations.len() + result.credential_violations.len(),
        if result.conservation_holds() { "ok" } else { "broken" },
        result.elapsed_ms
    )?;
    if let Some(path) = report {
        write_json(path, &result)?;
    }
    let clean = result.all_finished_ok()
        && result.outbound_violations.is_empty()
        && result.credential_violations.is_empty();
    Ok(if clean { EXIT_OK } else { EXIT_FAILURE })
}

fn ca_init(a: &CaInitArgs, out: &mut dyn Write) -> Outcome {
    let ca = CertificateAuthority::generate(&mut rand::rngs::OsRng);
    write_json(&a.out, &ca)?;
    write_json(&a.verification_key, &ca.verification_key())?;
    writeln!(out, "wrote {} and {}", a.out.display(), a.verification_key.display())?;
    Ok(EXIT_OK)
}

fn ca_issue(a: &CaIssueArgs, out: &mut dyn Write) -> Outcome {
    let ca: CertificateAuthority = read_json(&a.ca, "CA")?;
    if a.days <= 0 {
        return Err(Failure::usage("--days must be positive"));
    }
    let not_after = Utc::now() + ChronoDuration::days(a.days);
    let (cert, key) = ca.issue(&a.subject, not_after, &mut rand::rngs::OsRng);
    write_json(&a.cert, &cert)?;
    write_json(&a.key, &key)?;
    writeln!(out, "issued {} until {}", a.subject, not_after.format("%Y-%m-%d"))?;
    Ok(EXIT_OK)
}
