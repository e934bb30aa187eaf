use std::fmt;

use super::{check_token, JdlDocument, JdlError, JdlValue};

/// Executable name substituted into monitored jobs.
pub const WRAPPER_EXECUTABLE: &str = "atm-wrapper";

/// Push period used when the caller does not choose one.
pub const DEFAULT_RETRY_COUNT: u32 = 10;

const FLAG_PREFIXES: [&str; 4] = ["-id=", "-password=", "-site=", "-atm="];

/// Ticket data injected into a job description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteParams {
    pub job_id: String,
    pub password: String,
    pub site: String,
    pub atm_url: String,
    /// Seconds between monitoring pushes; only used when the original has
    /// no `RetryCount`.
    pub retry_count: u32,
}

impl RewriteParams {
    pub fn new(
        job_id: impl Into<String>,
        password: impl Into<String>,
        site: impl Into<String>,
        atm_url: impl Into<String>,
    ) -> Self {
        Self {
            job_id: job_id.into(),
            password: password.into(),
            site: site.into(),
            atm_url: atm_url.into(),
            retry_count: DEFAULT_RETRY_COUNT,
        }
    }

    pub fn with_retry_count(mut self, retry_count: u32) -> Self {
        self.retry_count = retry_count;
        self
    }

    fn check(&self) -> Result<(), JdlError> {
        if self.job_id.is_empty() || self.password.is_empty() {
            return Err(JdlError::InvalidParams(
                "job id and password must be non-empty".into(),
            ));
        }
        if self.retry_count < 1 {
            return Err(JdlError::InvalidParams("retry count must be >= 1".into()));
        }
        for (flag, value) in [
            ("id", &self.job_id),
            ("password", &self.password),
            ("site", &self.site),
            ("atm", &self.atm_url),
        ] {
            check_token(value).map_err(|e| JdlError::InvalidParams(format!("-{flag}: {e}")))?;
        }
        Ok(())
    }
}

/// The decoded `Arguments` token run of a wrapped job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedArguments {
    pub job_id: String,
    pub password: String,
    pub site: String,
    pub atm_url: Option<String>,
    /// The job's original executable.
    pub executable: String,
    /// The job's original arguments.
    pub args: Vec<String>,
}

impl WrappedArguments {
    /// `-id=.. -password=.. -site=.. [-atm=..] <executable> <args..>`.
    pub fn to_tokens(&self) -> Vec<String> {
        let mut tokens = vec![
            format!("-id={}", self.job_id),
            format!("-password={}", self.password),
            format!("-site={}", self.site),
        ];
        if let Some(url) = &self.atm_url {
            tokens.push(format!("-atm={url}"));
        }
        tokens.push(self.executable.clone());
        tokens.extend(self.args.iter().cloned());
        tokens
    }

    /// Decodes a token run. Leading `-id=`/`-password=`/`-site=`/`-atm=`
    /// flags are consumed in any order; the first other token is the
    /// original executable.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self, Vec<Violation>> {
        let mut id = None;
        let mut password = None;
        let mut site = None;
        let mut atm = None;
        let mut rest = tokens.iter().map(AsRef::as_ref).peekable();
        while let Some(token) = rest.peek() {
            let slot = if let Some(v) = token.strip_prefix("-id=") {
                (&mut id, v)
            } else if let Some(v) = token.strip_prefix("-password=") {
                (&mut password, v)
            } else if let Some(v) = token.strip_prefix("-site=") {
                (&mut site, v)
            } else if let Some(v) = token.strip_prefix("-atm=") {
                (&mut atm, v)
            } else {
                break;
            };
            if slot.0.is_none() {
                *slot.0 = Some(slot.1.to_string());
            }
            rest.next();
        }
        let executable = rest.next().map(str::to_string);
        let args: Vec<String> = rest.map(str::to_string).collect();

        let mut violations = Vec::new();
        for (flag, value) in [("id", &id), ("password", &password), ("site", &site)] {
            match value {
                None => violations.push(Violation::MissingFlag(flag)),
                Some(v) if v.is_empty() => violations.push(Violation::EmptyFlag(flag)),
                Some(_) => {}
            }
        }
        if matches!(&atm, Some(v) if v.is_empty()) {
            violations.push(Violation::EmptyFlag("atm"));
        }
        if executable.is_none() {
            violations.push(Violation::MissingCommand);
        }
        if !violations.is_empty() {
            return Err(violations);
        }
        Ok(Self {
            job_id: id.unwrap_or_default(),
            password: password.unwrap_or_default(),
            site: site.unwrap_or_default(),
            atm_url: atm,
            executable: executable.unwrap_or_default(),
            args,
        })
    }

    /// Reads and decodes the `Arguments` attribute of a wrapped document.
    pub fn from_document(doc: &JdlDocument) -> Result<Self, Vec<Violation>> {
        match doc.get("Arguments") {
            None => Err(vec![Violation::ArgumentsMissing]),
            Some(JdlValue::TokenRun(tokens)) => Self::from_tokens(tokens),
            Some(_) => Err(vec![Violation::ArgumentsNotTokenRun]),
        }
    }
}

/// One reason a document is not ready for monitored submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ExecutableNotWrapper,
    InputSandboxMissingWrapper,
    RetryCountMissing,
    RetryCountInvalid,
    ArgumentsMissing,
    ArgumentsNotTokenRun,
    MissingFlag(&'static str),
    EmptyFlag(&'static str),
    MissingCommand,
}

impl Violation {
    /// The attribute the violation is about.
    pub fn attribute(&self) -> &'static str {
        match self {
            Violation::ExecutableNotWrapper => "Executable",
            Violation::InputSandboxMissingWrapper => "InputSandbox",
            Violation::RetryCountMissing | Violation::RetryCountInvalid => "RetryCount",
            _ => "Arguments",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ExecutableNotWrapper => {
                write!(f, "Executable must be \"{WRAPPER_EXECUTABLE}\"")
            }
            Violation::InputSandboxMissingWrapper => {
                write!(f, "InputSandbox must include \"{WRAPPER_EXECUTABLE}\"")
            }
            Violation::RetryCountMissing => f.write_str("RetryCount is missing"),
            Violation::RetryCountInvalid => f.write_str("RetryCount must be an integer >= 1"),
            Violation::ArgumentsMissing => f.write_str("Arguments is missing"),
            Violation::ArgumentsNotTokenRun => {
                f.write_str("Arguments must be an unquoted token run")
            }
            Violation::MissingFlag(flag) => write!(f, "Arguments lacks -{flag}="),
            Violation::EmptyFlag(flag) => write!(f, "Arguments has an empty -{flag}="),
            Violation::MissingCommand => f.write_str("Arguments lacks the original executable"),
        }
    }
}

/// Rewrites `original` so that it runs under the monitoring wrapper.
///
/// `Executable` becomes `atm-wrapper`, `InputSandbox` gets the wrapper
/// prepended, `RetryCount` is added when absent and `Arguments` becomes
/// the ticket flags followed by the original command line. Every other
/// attribute is carried over untouched and in place.
pub fn rewrite_for_monitoring(
    original: &JdlDocument,
    params: &RewriteParams,
) -> Result<JdlDocument, JdlError> {
    params.check()?;
    let executable = match original.get("Executable") {
        None => return Err(JdlError::MissingExecutable),
        Some(JdlValue::String(s)) if s == WRAPPER_EXECUTABLE => {
            return Err(JdlError::AlreadyWrapped)
        }
        Some(JdlValue::String(s)) => s.clone(),
        Some(_) => {
            return Err(JdlError::InvalidValue {
                name: "Executable".into(),
                reason: "expected a quoted string".into(),
            })
        }
    };
    let args: Vec<String> = match original.get("Arguments") {
        None => Vec::new(),
        Some(JdlValue::String(s)) => s.split_whitespace().map(str::to_string).collect(),
        Some(JdlValue::TokenRun(tokens)) => tokens.clone(),
        Some(_) => {
            return Err(JdlError::InvalidValue {
                name: "Arguments".into(),
                reason: "expected a quoted string or token run".into(),
            })
        }
    };
    for token in std::iter::once(&executable).chain(&args) {
        check_token(token).map_err(|reason| JdlError::InvalidValue {
            name: "Arguments".into(),
            reason,
        })?;
    }
    // Otherwise the decoder would read the executable as a ticket flag.
    if FLAG_PREFIXES.iter().any(|p| executable.starts_with(p)) {
        return Err(JdlError::InvalidValue {
            name: "Executable".into(),
            reason: format!("{executable:?} looks like a wrapper flag"),
        });
    }
    let sandbox = match original.get("InputSandbox") {
        None => vec![WRAPPER_EXECUTABLE.to_string()],
        Some(JdlValue::StringList(items)) => {
            std::iter::once(WRAPPER_EXECUTABLE.to_string())
                .chain(items.iter().cloned())
                .collect()
        }
        Some(JdlValue::String(s)) => vec![WRAPPER_EXECUTABLE.to_string(), s.clone()],
        Some(_) => {
            return Err(JdlError::InvalidValue {
                name: "InputSandbox".into(),
                reason: "expected a string list".into(),
            })
        }
    };
    let wrapped_args = WrappedArguments {
        job_id: params.job_id.clone(),
        password: params.password.clone(),
        site: params.site.clone(),
        atm_url: Some(params.atm_url.clone()),
        executable,
        args,
    };

    let needs_retry = !original.contains("RetryCount");
    let retry = JdlValue::Number(i64::from(params.retry_count));
    let mut out = JdlDocument::new();
    for (name, value) in original.iter() {
        match name {
            "Executable" => out.push(name, JdlValue::String(WRAPPER_EXECUTABLE.into()))?,
            "InputSandbox" => out.push(name, JdlValue::StringList(sandbox.clone()))?,
            "Arguments" => {
                if needs_retry {
                    out.push("RetryCount", retry.clone())?;
                }
                out.push(name, JdlValue::TokenRun(wrapped_args.to_tokens()))?;
            }
            _ => out.push(name, value.clone())?,
        }
    }
    if !out.contains("InputSandbox") {
        out.push("InputSandbox", JdlValue::StringList(sandbox))?;
    }
    if !out.contains("RetryCount") {
        out.push("RetryCount", retry)?;
    }
    if !out.contains("Arguments") {
        out.push("Arguments", JdlValue::TokenRun(wrapped_args.to_tokens()))?;
    }
    Ok(out)
}

/// Lists everything that keeps `doc` from being a valid monitored job.
pub fn validate_monitoring_jdl(doc: &JdlDocument) -> Vec<Violation> {
    let mut violations = Vec::new();
    if doc.get("Executable").and_then(JdlValue::as_str) != Some(WRAPPER_EXECUTABLE) {
        violations.push(Violation::ExecutableNotWrapper);
    }
    let has_wrapper = doc
        .get("InputSandbox")
        .and_then(JdlValue::as_list)
        .is_some_and(|items| items.iter().any(|i| i == WRAPPER_EXECUTABLE));
    if !has_wrapper {
        violations.push(Violation::InputSandboxMissingWrapper);
    }
    match doc.get("RetryCount") {
        None => violations.push(Violation::RetryCountMissing),
        Some(JdlValue::Number(n)) if *n >= 1 => {}
        Some(_) => violations.push(Violation::RetryCountInvalid),
    }
    if let Err(mut arg_violations) = WrappedArguments::from_document(doc) {
        violations.append(&mut arg_violations);
    }
    violations
}
