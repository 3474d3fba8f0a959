//! Transport-level deployment of the reassembly dataplane over TCP.
//!
//! The server turns each bounded read from a connection into one fragment
//! and feeds it through the same reassembly pool, buffer-input policy,
//! selector and accelerator code the simulator uses. The client library
//! frames requests and the load generator drives closed-loop clients.

pub mod client;
pub mod config;
pub mod loadgen;
pub mod server;

pub use client::{Client, ClientError, Response};
pub use config::{ConfigError, ServerConfig};
pub use loadgen::{run_loadgen, LoadReport, LoadgenConfig, RequestRow, Stop};
pub use server::{Server, ServerReport};
