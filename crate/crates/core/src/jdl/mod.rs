//! Job Description Language documents.
//!
//! A JDL file is a flat sequence of `Name = value;` statements. This module
//! parses and renders that format and implements the monitoring rewrite
//! that substitutes `atm-wrapper` as the job's executable while keeping the
//! original command recoverable from `Arguments`.

mod parse;
mod rewrite;

use std::fmt;

use thiserror::Error;

pub use parse::parse_jdl;
pub use rewrite::{
    rewrite_for_monitoring, validate_monitoring_jdl, RewriteParams, Violation, WrappedArguments,
    DEFAULT_RETRY_COUNT, WRAPPER_EXECUTABLE,
};

/// Errors produced while parsing, editing or rewriting a JDL document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JdlError {
    #[error("syntax error at line {line}, column {column}: expected {expected}")]
    Syntax {
        line: usize,
        column: usize,
        expected: String,
    },
    #[error("duplicate attribute `{0}`")]
    DuplicateAttribute(String),
    #[error("`{0}` is not a valid attribute name")]
    InvalidName(String),
    #[error("value of `{name}` cannot be represented in JDL text: {reason}")]
    InvalidValue { name: String, reason: String },
    #[error("document has no Executable attribute")]
    MissingExecutable,
    #[error("document is already wrapped for monitoring")]
    AlreadyWrapped,
    #[error("invalid rewrite parameters: {0}")]
    InvalidParams(String),
}

/// A single attribute value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JdlValue {
    /// Double-quoted text.
    String(String),
    /// Integer literal.
    Number(i64),
    /// `{"a", "b"}`.
    StringList(Vec<String>),
    /// Unquoted whitespace separated tokens, only used for `Arguments`.
    TokenRun(Vec<String>),
    /// Anything else, kept as the exact source text.
    Expression(String),
}

impl JdlValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            JdlValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<i64> {
        match self {
            JdlValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            JdlValue::StringList(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&[String]> {
        match self {
            JdlValue::TokenRun(v) => Some(v),
            _ => None,
        }
    }

    fn check_representable(&self) -> Result<(), String> {
        match self {
            JdlValue::String(s) => check_string(s),
            JdlValue::Number(_) => Ok(()),
            JdlValue::StringList(items) => items.iter().try_for_each(|s| check_string(s)),
            JdlValue::TokenRun(tokens) => {
                if tokens.is_empty() {
                    return Err("token run is empty".into());
                }
                tokens.iter().try_for_each(|t| check_token(t))
            }
            JdlValue::Expression(text) => check_expression(text),
        }
    }
}

fn check_string(s: &str) -> Result<(), String> {
    if s.chars().any(|c| c == '\n' || c == '\r') {
        return Err("strings may not contain line breaks".into());
    }
    if s.chars().any(is_normalized_char) {
        return Err("strings may not contain typographic quotes or dashes".into());
    }
    Ok(())
}

/// Returns an error message if `token` cannot appear in a token run.
pub(crate) fn check_token(token: &str) -> Result<(), String> {
    if token.is_empty() {
        return Err("empty token".into());
    }
    if let Some(c) = token
        .chars()
        .find(|c| c.is_whitespace() || matches!(c, ';' | '"' | '#' | '{' | '}') || is_normalized_char(*c))
    {
        return Err(format!("token {token:?} contains {c:?}"));
    }
    Ok(())
}

fn check_expression(text: &str) -> Result<(), String> {
    let trimmed = text.trim();
    if trimmed.is_empty() || trimmed.len() != text.len() {
        return Err("expression must be non-empty without surrounding whitespace".into());
    }
    if text.chars().any(is_normalized_char) {
        return Err("expression contains typographic quotes or dashes".into());
    }
    // The rendered statement has to parse back to the identical expression.
    match parse_jdl(&format!("Requirements = {text};")) {
        Ok(doc) if doc.get("Requirements") == Some(&JdlValue::Expression(text.to_string())) => {
            Ok(())
        }
        _ => Err(format!("{text:?} does not reparse as the same expression")),
    }
}

pub(crate) fn is_normalized_char(c: char) -> bool {
    matches!(
        c,
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' | '\u{2013}' | '\u{2014}'
    )
}

pub(crate) fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl fmt::Display for JdlValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JdlValue::String(s) => write_quoted(f, s),
            JdlValue::Number(n) => write!(f, "{n}"),
            JdlValue::StringList(items) => {
                f.write_str("{")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write_quoted(f, item)?;
                }
                f.write_str("}")
            }
            JdlValue::TokenRun(tokens) => f.write_str(&tokens.join(" ")),
            JdlValue::Expression(text) => f.write_str(text),
        }
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

/// An ordered, duplicate-free list of attributes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JdlDocument {
    attributes: Vec<(String, JdlValue)>,
}

impl JdlDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&JdlValue> {
        self.attributes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &JdlValue)> {
        self.attributes.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(n, _)| n.as_str())
    }

    /// Appends a new attribute. Fails on duplicates.
    pub fn push(&mut self, name: impl Into<String>, value: JdlValue) -> Result<(), JdlError> {
        let name = name.into();
        Self::check(&name, &value)?;
        if self.contains(&name) {
            return Err(JdlError::DuplicateAttribute(name));
        }
        self.attributes.push((name, value));
        Ok(())
    }

    /// Replaces the value in place, or appends when absent.
    pub fn set(&mut self, name: impl Into<String>, value: JdlValue) -> Result<(), JdlError> {
        let name = name.into();
        Self::check(&name, &value)?;
        match self.attributes.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.attributes.push((name, value)),
        }
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<JdlValue> {
        let idx = self.attributes.iter().position(|(n, _)| n == name)?;
        Some(self.attributes.remove(idx).1)
    }

    fn check(name: &str, value: &JdlValue) -> Result<(), JdlError> {
        if !is_identifier(name) {
            return Err(JdlError::InvalidName(name.to_string()));
        }
        if matches!(value, JdlValue::TokenRun(_)) && name != "Arguments" {
            return Err(JdlError::InvalidValue {
                name: name.to_string(),
                reason: "token runs are only allowed for Arguments".into(),
            });
        }
        value.check_representable().map_err(|reason| JdlError::InvalidValue {
            name: name.to_string(),
            reason,
        })
    }

    /// Renders one `Name = value;` statement per line.
    pub fn render(&self) -> String {
        render_jdl(self)
    }
}

pub fn render_jdl(doc: &JdlDocument) -> String {
    let mut out = String::new();
    for (name, value) in &doc.attributes {
        out.push_str(name);
        out.push_str(" = ");
        out.push_str(&value.to_string());
        out.push_str(";\n");
    }
    out
}

impl fmt::Display for JdlDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_jdl(self))
    }
}

impl std::str::FromStr for JdlDocument {
    type Err = JdlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_jdl(s)
    }
}
