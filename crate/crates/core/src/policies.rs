//! Dispatch decisions: which reassembly buffer takes a new request, and which
//! accelerator queue takes an assembled one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("no accelerator instance hosts type {0}")]
    UnknownAccelerator(u16),
    #[error("unknown policy name `{0}`")]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferInputPolicyKind {
    NaiveRr,
    EligibleRr,
    Jsb,
}

impl BufferInputPolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::NaiveRr => "naive_rr",
            Self::EligibleRr => "eligible_rr",
            Self::Jsb => "jsb",
        }
    }
}

impl FromStr for BufferInputPolicyKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive_rr" => Ok(Self::NaiveRr),
            "eligible_rr" => Ok(Self::EligibleRr),
            "jsb" => Ok(Self::Jsb),
            other => Err(PolicyError::UnknownName(other.to_owned())),
        }
    }
}

impl fmt::Display for BufferInputPolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What the dispatcher can observe about one buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferView {
    /// Not in the middle of assembling another request.
    pub eligible: bool,
    pub free_bytes: u64,
}

impl BufferView {
    fn admits(&self, need_bytes: u64) -> bool {
        self.eligible && self.free_bytes >= need_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BufferInputPolicy {
    /// Cycles over every buffer, eligible or not; the caller drops the
    /// request when the chosen buffer cannot take it.
    NaiveRr { cursor: usize },
    /// Cycles over buffers that are eligible and have room.
    EligibleRr { cursor: usize },
    /// Eligible buffer with room and the most free bytes.
    Jsb,
}

impl BufferInputPolicy {
    pub fn new(kind: BufferInputPolicyKind) -> Self {
        match kind {
            BufferInputPolicyKind::NaiveRr => Self::NaiveRr { cursor: 0 },
            BufferInputPolicyKind::EligibleRr => Self::EligibleRr { cursor: 0 },
            BufferInputPolicyKind::Jsb => Self::Jsb,
        }
    }

    pub fn kind(&self) -> BufferInputPolicyKind {
        match self {
            Self::NaiveRr { .. } => BufferInputPolicyKind::NaiveRr,
            Self::EligibleRr { .. } => BufferInputPolicyKind::EligibleRr,
            Self::Jsb => BufferInputPolicyKind::Jsb,
        }
    }

    pub fn pick_buffer(&mut self, buffers: &[BufferView], need_bytes: u64) -> Option<usize> {
        let n = buffers.len();
        if n == 0 {
            return None;
        }
        match self {
            Self::NaiveRr { cursor } => {
                let pick = *cursor % n;
                *cursor = (pick + 1) % n;
                Some(pick)
            }
            Self::EligibleRr { cursor } => {
                let start = *cursor % n;
                let pick = (0..n)
                    .map(|off| (start + off) % n)
                    .find(|&i| buffers[i].admits(need_bytes))?;
                *cursor = (pick + 1) % n;
                Some(pick)
            }
            Self::Jsb => buffers
                .iter()
                .enumerate()
                .filter(|(_, b)| b.admits(need_bytes))
                // max free bytes, lowest index on ties
                .min_by_key(|(i, b)| (std::cmp::Reverse(b.free_bytes), *i))
                .map(|(i, _)| i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorPolicyKind {
    Rr,
    Jsq,
}

impl SelectorPolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rr => "rr",
            Self::Jsq => "jsq",
        }
    }
}

impl FromStr for SelectorPolicyKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rr" => Ok(Self::Rr),
            "jsq" => Ok(Self::Jsq),
            other => Err(PolicyError::UnknownName(other.to_owned())),
        }
    }
}

impl fmt::Display for SelectorPolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What the selector can observe about one accelerator queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueView {
    pub accelerator_id: u16,
    /// Bytes waiting in the queue plus the request in service, if any.
    pub queued_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectorPolicy {
    RoundRobin { cursors: BTreeMap<u16, usize> },
    Jsq,
}

impl SelectorPolicy {
    pub fn new(kind: SelectorPolicyKind) -> Self {
        match kind {
            SelectorPolicyKind::Rr => Self::RoundRobin {
                cursors: BTreeMap::new(),
            },
            SelectorPolicyKind::Jsq => Self::Jsq,
        }
    }

    pub fn kind(&self) -> SelectorPolicyKind {
        match self {
            Self::RoundRobin { .. } => SelectorPolicyKind::Rr,
            Self::Jsq => SelectorPolicyKind::Jsq,
        }
    }

    /// Index into `queues` of the queue that should take a request for
    /// `accelerator_id`.
    pub fn pick_accelerator_queue(
        &mut self,
        accelerator_id: u16,
        queues: &[QueueView],
    ) -> Result<usize, PolicyError> {
        let mut same_type = queues
            .iter()
            .enumerate()
            .filter(|(_, q)| q.accelerator_id == accelerator_id)
            .peekable();
        if same_type.peek().is_none() {
            return Err(PolicyError::UnknownAccelerator(accelerator_id));
        }
        match self {
            Self::RoundRobin { cursors } => {
                let candidates: Vec<usize> = same_type.map(|(i, _)| i).collect();
                let cursor = cursors.entry(accelerator_id).or_insert(0);
                let pick = candidates[*cursor % candidates.len()];
                *cursor = (*cursor + 1) % candidates.len();
                Ok(pick)
            }
            Self::Jsq => Ok(same_type
                .min_by_key(|(i, q)| (q.queued_bytes, *i))
                .map(|(i, _)| i)
                .expect("non-empty")),
        }
    }
}
