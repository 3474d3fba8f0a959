//! Core of the request reassembly dataplane.
//!
//! Everything here is transport-agnostic and deterministic: the wire codec,
//! the reassembly buffer pool, buffer-input and selector policies, the
//! software accelerators, the discrete-event kernel and the simulator built
//! on top of them, plus the analytical queueing model used to cross-check it.

pub mod accelerators;
pub mod engine;
pub mod experiments;
pub mod oracle;
pub mod policies;
pub mod protocol;
pub mod reassembly;
pub mod sim;
pub mod workload;
