//! Blocking HTTP client for the ATM wire protocol.
//!
//! Every request opens one TCP connection through a [`Dialer`], so a
//! simulation can observe (and audit) exactly who connects where.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use url::Url;

use crate::model::{sign_request, Certificate, EventReport, JobTicket, UserKey};
use crate::protocol::{
    self, ApiError, ErrorBody, Health, QueryResponse, RegisterUserResponse, SignedAction,
    UpdateRequest, UpdateResponse,
};

/// Opens the TCP connections used by the client.
pub trait Dialer: Send + Sync {
    fn dial(&self, host: &str, port: u16, timeout: Duration) -> io::Result<TcpStream>;
}

/// Plain `connect(2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpDialer;

impl Dialer for TcpDialer {
    fn dial(&self, host: &str, port: u16, timeout: Duration) -> io::Result<TcpStream> {
        let mut last = None;
        for addr in (host, port).to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => return Ok(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("{host}:{port} did not resolve"))
        }))
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid server URL {0:?}")]
    BadUrl(String),
    #[error("transport error: {0}")]
    Transport(#[from] io::Error),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("server error {status}: {error}")]
    Api { status: u16, error: ApiError },
}

impl ClientError {
    pub fn api(&self) -> Option<&ApiError> {
        match self {
            ClientError::Api { error, .. } => Some(error),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// True when the request may not have reached the server.
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Transport(_) | ClientError::Protocol(_))
    }
}

/// A raw HTTP response.
#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Clone)]
pub struct AtmClient {
    base: Url,
    host: String,
    port: u16,
    dialer: Arc<dyn Dialer>,
    timeout: Duration,
}

impl std::fmt::Debug for AtmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AtmClient").field("base", &self.base.as_str()).finish()
    }
}

impl AtmClient {
    pub fn new(url: &str) -> Result<Self, ClientError> {
        let base = Url::parse(url).map_err(|_| ClientError::BadUrl(url.to_string()))?;
        if base.scheme() != "http" {
            return Err(ClientError::BadUrl(url.to_string()));
        }
        let host = base
            .host_str()
            .ok_or_else(|| ClientError::BadUrl(url.to_string()))?
            .trim_start_matches('[')
            .trim_end_matches(']')
            .to_string();
        let port = base.port_or_known_default().unwrap_or(80);
        Ok(Self {
            base,
            host,
            port,
            dialer: Arc::new(TcpDialer),
            timeout: Duration::from_secs(10),
        })
    }

    pub fn with_dialer(mut self, dialer: Arc<dyn Dialer>) -> Self {
        self.dialer = dialer;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn url(&self) -> &str {
        self.base.as_str()
    }

    /// `host:port` the client connects to.
    pub fn authority(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    /// Sends one request and returns the raw response.
    pub fn send(&self, method: &str, path: &str, body: Option<&[u8]>) -> Result<HttpResponse, ClientError> {
        let mut stream = self.dialer.dial(&self.host, self.port, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let mut request = format!(
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\nAccept: application/json\r\n",
            self.authority()
        );
        if let Some(body) = body {
            request.push_str(&format!(
                "Content-Type: application/json\r\nContent-Length: {}\r\n",
                body.len()
            ));
        }
        request.push_str("\r\n");
        let mut bytes = request.into_bytes();
        if let Some(body) = body {
            bytes.extend_from_slice(body);
        }
        stream.write_all(&bytes)?;
        stream.flush()?;

        let mut raw = Vec::new();
        stream.read_to_end(&mut raw)?;
        parse_response(&raw)
    }

    fn call<T: DeserializeOwned>(
        &self,
        method: &str,
        path: &str,
        body: Option<&[u8]>,
    ) -> Result<T, ClientError> {
        let response = self.send(method, path, body)?;
        decode_response(&response)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let bytes = serde_json::to_vec(body).expect("request bodies serialize");
        self.call("POST", path, Some(&bytes))
    }

    fn signed<T: DeserializeOwned>(
        &self,
        path: &str,
        action: SignedAction,
        cert: &Certificate,
        key: &UserKey,
    ) -> Result<T, ClientError> {
        let request = sign_request(&action.to_body(), key, cert);
        self.post(path, &request)
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.call("GET", protocol::HEALTHZ, None)
    }

    pub fn register_user(
        &self,
        cert: &Certificate,
        key: &UserKey,
    ) -> Result<RegisterUserResponse, ClientError> {
        let action = SignedAction::UserRegister {
            issued_at: Utc::now(),
        };
        self.signed(protocol::USER_REGISTER, action, cert, key)
    }

    pub fn register_job(
        &self,
        cert: &Certificate,
        key: &UserKey,
        site: &str,
    ) -> Result<JobTicket, ClientError> {
        let action = SignedAction::JobRegister {
            issued_at: Utc::now(),
            site: site.to_string(),
        };
        self.signed(protocol::JOB_REGISTER, action, cert, key)
    }

    pub fn update(
        &self,
        job_id: &str,
        password: &str,
        event: &EventReport,
    ) -> Result<u64, ClientError> {
        let request = UpdateRequest {
            job_id: job_id.to_string(),
            password: password.to_string(),
            event: event.clone(),
        };
        let response: UpdateResponse = self.post(protocol::JOB_UPDATE, &request)?;
        Ok(response.seq)
    }

    /// Status of one job, authenticated by its ticket.
    pub fn status(&self, job_id: &str, password: &str) -> Result<QueryResponse, ClientError> {
        let response = self.status_raw(job_id, password)?;
        decode_response(&response)
    }

    pub fn status_raw(&self, job_id: &str, password: &str) -> Result<HttpResponse, ClientError> {
        let mut query = url::form_urlencoded::Serializer::new(String::new());
        query.append_pair("job_id", job_id);
        query.append_pair("password", password);
        self.send("GET", &format!("{}?{}", protocol::JOB_STATUS, query.finish()), None)
    }

    /// All of the certificate holder's jobs, or just `job_id` if given.
    pub fn query(
        &self,
        cert: &Certificate,
        key: &UserKey,
        job_id: Option<&str>,
    ) -> Result<QueryResponse, ClientError> {
        let response = self.query_raw(cert, key, job_id)?;
        decode_response(&response)
    }

    pub fn query_raw(
        &self,
        cert: &Certificate,
        key: &UserKey,
        job_id: Option<&str>,
    ) -> Result<HttpResponse, ClientError> {
        let action = SignedAction::JobQuery {
            issued_at: Utc::now(),
            job_id: job_id.map(str::to_string),
        };
        let request = sign_request(&action.to_body(), key, cert);
        let bytes = serde_json::to_vec(&request).expect("request bodies serialize");
        self.send("POST", protocol::JOB_QUERY, Some(&bytes))
    }
}

/// Decodes a 200 body as `T`, anything else as an [`ApiError`].
pub fn decode_response<T: DeserializeOwned>(response: &HttpResponse) -> Result<T, ClientError> {
    if response.status == 200 {
        return serde_json::from_slice(&response.body)
            .map_err(|e| ClientError::Protocol(format!("response body: {e}")));
    }
    let error = match serde_json::from_slice::<ErrorBody>(&response.body) {
        Ok(body) => ApiError::from_body(&body),
        Err(_) => ApiError::Internal(String::from_utf8_lossy(&response.body).into_owned()),
    };
    Err(ClientError::Api {
        status: response.status,
        error,
    })
}

fn parse_response(raw: &[u8]) -> Result<HttpResponse, ClientError> {
    let mut headers = [httparse::EMPTY_HEADER; 32];
    let mut response = httparse::Response::new(&mut headers);
    let header_len = match response.parse(raw) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => {
            return Err(ClientError::Protocol("truncated response head".into()))
        }
        Err(e) => return Err(ClientError::Protocol(e.to_string())),
    };
    let status = response
        .code
        .ok_or_else(|| ClientError::Protocol("missing status".into()))?;
    let header = |name: &str| {
        response
            .headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .map(|h| String::from_utf8_lossy(h.value).trim().to_ascii_lowercase())
    };
    let rest = &raw[header_len..];
    let body = if header("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
        dechunk(rest)?
    } else if let Some(len) = header("content-length") {
        let len: usize = len
            .parse()
            .map_err(|_| ClientError::Protocol("bad content-length".into()))?;
        if rest.len() < len {
            return Err(ClientError::Protocol("truncated body".into()));
        }
        rest[..len].to_vec()
    } else {
        rest.to_vec()
    };
    Ok(HttpResponse { status, body })
}

fn dechunk(mut data: &[u8]) -> Result<Vec<u8>, ClientError> {
    let bad = || ClientError::Protocol("bad chunked encoding".into());
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").ok_or_else(bad)?;
        let size_text = std::str::from_utf8(&data[..line_end]).map_err(|_| bad())?;
        let size_text = size_text.split(';').next().unwrap_or("").trim();
        let size = usize::from_str_radix(size_text, 16).map_err(|_| bad())?;
        data = &data[line_end + 2..];
        if size == 0 {
            return Ok(out);
        }
        if data.len() < size + 2 {
            return Err(bad());
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}
