//! Server configuration, read from TOML.
//!
//! ```toml
//! listen = "127.0.0.1:7070"
//! fragment_bytes = 4096
//! selector = "rr"            # or "jsq"
//! record_trace = false
//!
//! [pool]
//! buffer_bytes = [262144, 262144, 262144, 262144]
//! single_fragment_bytes = 1048576   # omit to disable
//! input_policy = "eligible_rr"      # naive_rr | eligible_rr | jsb
//!
//! [[accelerators]]
//! type_id = 0
//! kind = "echo"                     # echo | top_k | logit | min_max | modeled
//! instances = 1
//! queue_capacity_bytes = 65536
//!
//! [[accelerators]]
//! type_id = 9
//! kind = "modeled"
//! service_time_us = 2000.0
//! instances = 2
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use offrac_core::accelerators::AcceleratorSpec;
use offrac_core::policies::SelectorPolicyKind;
use offrac_core::protocol::REQUEST_HEADER_BYTES;
use offrac_core::reassembly::PoolConfig;
use offrac_core::workload::DEFAULT_FRAGMENT_BYTES;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Upper bound on one transport read, and so on one fragment.
    #[serde(default = "default_fragment_bytes")]
    pub fragment_bytes: u64,
    #[serde(default)]
    pub pool: PoolConfig,
    pub accelerators: Vec<AcceleratorSpec>,
    #[serde(default = "default_selector")]
    pub selector: SelectorPolicyKind,
    /// Record every pool operation for later replay.
    #[serde(default)]
    pub record_trace: bool,
}

fn default_listen() -> String {
    "127.0.0.1:7070".into()
}

fn default_fragment_bytes() -> u64 {
    DEFAULT_FRAGMENT_BYTES
}

fn default_selector() -> SelectorPolicyKind {
    SelectorPolicyKind::Rr
}

impl ServerConfig {
    /// Config listening on an ephemeral loopback port.
    pub fn loopback(accelerators: Vec<AcceleratorSpec>) -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            fragment_bytes: DEFAULT_FRAGMENT_BYTES,
            pool: PoolConfig::default(),
            accelerators,
            selector: SelectorPolicyKind::Rr,
            record_trace: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// One worker thread per accelerator slot.
    pub fn worker_count(&self) -> usize {
        self.accelerators.iter().map(|a| a.instances).sum()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        if self.fragment_bytes < REQUEST_HEADER_BYTES as u64 {
            return Err(invalid(format!("fragment_bytes must be at least {REQUEST_HEADER_BYTES}")));
        }
        self.pool.validate().map_err(invalid)?;
        if self.accelerators.is_empty() {
            return Err(invalid("no accelerators configured".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &self.accelerators {
            a.validate().map_err(invalid)?;
            if !seen.insert(a.type_id) {
                return Err(invalid(format!("accelerator {} listed twice", a.type_id)));
            }
        }
        Ok(())
    }
}
