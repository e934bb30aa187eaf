//! The ATM server.
//!
//! [`AtmService`] holds the request handlers and can be driven directly;
//! [`AtmServer::start`] puts it behind HTTP on a background runtime. The
//! server only ever accepts connections; it never dials out.

mod http;
mod service;

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::model::{CaVerificationKey, PolicyError, SitePolicy};
use crate::protocol::ApiError;
use crate::store::{Durability, Store, StoreError};

pub use service::{AtmService, Credentials};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub server_id: String,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default)]
    pub policy: SitePolicy,
    pub store_root: PathBuf,
    pub ca_verification_key: CaVerificationKey,
    /// URL written into tickets; defaults to `http://<bound address>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_url: Option<String>,
    /// Seeds ticket and salt generation (tests and simulations only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub durability: Durability,
}

fn default_listen() -> String {
    "127.0.0.1:0".to_string()
}

impl ServerConfig {
    pub fn new(
        server_id: impl Into<String>,
        store_root: impl Into<PathBuf>,
        ca_verification_key: CaVerificationKey,
    ) -> Self {
        Self {
            server_id: server_id.into(),
            listen_address: default_listen(),
            policy: SitePolicy::allow_all(),
            store_root: store_root.into(),
            ca_verification_key,
            public_url: None,
            rng_seed: None,
            durability: Durability::default(),
        }
    }

    /// Reads a JSON config. Lines whose first non-blank characters are
    /// `//` are comments.
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path).map_err(ServerError::Io)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ServerError> {
        // Blank out comment lines so parse errors keep their line numbers.
        let json: String = text
            .lines()
            .map(|l| if l.trim_start().starts_with("//") { "" } else { l })
            .collect::<Vec<_>>()
            .join("\n");
        let config: Self =
            serde_json::from_str(&json).map_err(|e| ServerError::Config(e.to_string()))?;
        config.policy.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("service startup failed: {0}")]
    Service(#[from] ApiError),
}

pub struct AtmServer;

impl AtmServer {
    /// Binds, opens the store and serves on a background thread.
    pub fn start(config: ServerConfig) -> Result<ServerHandle, ServerError> {
        Self::start_inner(config, false)
    }

    /// Like [`AtmServer::start`], but SIGTERM and SIGINT also shut the
    /// server down.
    pub fn start_with_signals(config: ServerConfig) -> Result<ServerHandle, ServerError> {
        Self::start_inner(config, true)
    }

    fn start_inner(config: ServerConfig, signals: bool) -> Result<ServerHandle, ServerError> {
        config.policy.validate()?;
        let listener = TcpListener::bind(&config.listen_address)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let url = config
            .public_url
            .clone()
            .unwrap_or_else(|| format!("http://{addr}"));
        let store = Arc::new(Store::open_with(&config.store_root, config.durability)?);
        let service = Arc::new(AtmService::new(
            config.server_id.clone(),
            url.clone(),
            config.policy.clone(),
            config.ca_verification_key.clone(),
            store,
            config.rng_seed,
        )?);

        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .thread_name(format!("atm-{}", config.server_id))
            .enable_all()
            .build()?;
        let app = http::router(service.clone());
        let thread_service = service.clone();
        let thread = std::thread::Builder::new()
            .name(format!("atm-server-{}", config.server_id))
            .spawn(move || -> io::Result<()> {
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    axum::serve(listener, app)
                        .with_graceful_shutdown(shutdown_signal(rx, signals))
                        .await
                })?;
                thread_service.store().sync()?;
                Ok(())
            })?;
        log::info!("{} listening on {addr}", config.server_id);
        Ok(ServerHandle {
            addr,
            url,
            service,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }
}

async fn shutdown_signal(rx: oneshot::Receiver<()>, signals: bool) {
    if !signals {
        let _ = rx.await;
        return;
    }
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = match signal(SignalKind::terminate()) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("cannot install SIGTERM handler: {e}");
            let _ = rx.await;
            return;
        }
    };
    tokio::select! {
        _ = rx => {}
        _ = term.recv() => log::info!("SIGTERM received"),
        _ = tokio::signal::ctrl_c() => log::info!("SIGINT received"),
    }
}

/// A running server. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    url: String,
    service: Arc<AtmService>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn server_id(&self) -> &str {
        self.service.server_id()
    }

    pub fn service(&self) -> &Arc<AtmService> {
        &self.service
    }

    /// Blocks until the server stops on its own (signal).
    pub fn wait(mut self) -> io::Result<()> {
        let result = match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        };
        self.shutdown.take();
        result
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::warn!("server shutdown: {e}");
        }
    }
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle")
            .field("server_id", &self.server_id())
            .field("addr", &self.addr)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commented_sample_config_parses() {
        let sample = include_str!("../../config/atm-server.sample.json")
            .replace("REPLACE_WITH_CA_VERIFICATION_KEY", "AAAA");
        let config = ServerConfig::parse(&sample).unwrap();
        assert_eq!(config.server_id, "atm-1");
        assert_eq!(config.listen_address, "127.0.0.1:8080");
        assert_eq!(config.policy, SitePolicy::allow_all());
        assert_eq!(config.durability, Durability::Flush);
        assert_eq!(config.ca_verification_key.0, vec![0, 0, 0]);
    }

    #[test]
    fn config_defaults_and_errors() {
        let minimal = r#"{"server_id":"s","store_root":"/tmp/x","ca_verification_key":""}"#;
        let config = ServerConfig::parse(minimal).unwrap();
        assert_eq!(config.listen_address, "127.0.0.1:0");
        assert_eq!(config.public_url, None);
        let bad = r#"{"server_id":"s","store_root":"/tmp/x","ca_verification_key":"",
                      "policy":{"mode":"denylist","subjects":[]}}"#;
        assert!(matches!(ServerConfig::parse(bad), Err(ServerError::Policy(_))));
        assert!(matches!(ServerConfig::parse("{"), Err(ServerError::Config(_))));
    }
}
