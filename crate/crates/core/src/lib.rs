//! Application-job monitoring for batch grids.
//!
//! Jobs are registered with an ATM (advance task monitor) server that hands
//! back a per-job ticket. The job description is rewritten so that the job
//! runs under a wrapper which parses progress from the job's standard output
//! and pushes it to the server over outbound connections only. Users read
//! the status of their own jobs back through the same server.
//!
//! Modules:
//!
//! - [`jdl`]: job description parsing, rendering and the monitoring rewrite
//! - [`model`]: tickets, events, records and the mock certificate scheme
//! - [`store`]: file-backed user, job and status databases
//! - [`server`]: the HTTP server and its request handlers
//! - [`client`]: the matching HTTP client with an auditable dialer
//! - [`agent`]: the job wrapper that runs on the worker node
//! - [`gridsim`]: a local UI -> RB -> CE -> WN pipeline for end-to-end runs
//! - [`cli`]: the `atm` command line

pub mod jdl;
pub mod model;
pub mod store;
pub mod protocol;
pub mod server;
pub mod client;
pub mod agent;
pub mod gridsim;
pub mod cli;
