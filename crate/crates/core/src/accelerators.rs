//! Software accelerators and the run-to-completion slot model.
//!
//! Real accelerators are pure functions of `(payload, parameters)` working on
//! big-endian 32-bit words. Modeled accelerators only have an execution time,
//! proportional to the number of fragments a request spans.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Nanos;
use crate::protocol::PARAMETER_BYTES;
use crate::reassembly::AssembledRequest;

pub const DEFAULT_QUEUE_BYTES: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcceleratorError {
    #[error("payload length {0} is not a multiple of 4 bytes")]
    Unaligned(usize),
    #[error("K = {k} outside 1..={len}")]
    InvalidK { k: u32, len: usize },
    #[error("element {index} = {value} outside the open interval (0, 1)")]
    OutOfDomain { index: usize, value: f32 },
    #[error("element {index} is not finite")]
    NotFinite { index: usize },
    #[error("empty payload")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcceleratorKind {
    Echo,
    TopK,
    Logit,
    MinMax,
    /// Execution time only: `service_time_us` per fragment of input.
    Modeled { service_time_us: f64 },
}

impl AcceleratorKind {
    pub fn modeled_us(us: f64) -> Self {
        AcceleratorKind::Modeled { service_time_us: us }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AcceleratorKind::Echo => "echo",
            AcceleratorKind::TopK => "top_k",
            AcceleratorKind::Logit => "logit",
            AcceleratorKind::MinMax => "min_max",
            AcceleratorKind::Modeled { .. } => "modeled",
        }
    }

    pub fn service_time_per_fragment(&self) -> Option<Nanos> {
        match *self {
            AcceleratorKind::Modeled { service_time_us } => Some(Nanos::from_micros_f64(service_time_us)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorSpec {
    pub type_id: u16,
    #[serde(flatten)]
    pub kind: AcceleratorKind,
    #[serde(default = "one")]
    pub instances: usize,
    #[serde(default = "default_queue_bytes")]
    pub queue_capacity_bytes: u64,
}

fn one() -> usize {
    1
}

fn default_queue_bytes() -> u64 {
    DEFAULT_QUEUE_BYTES
}

impl AcceleratorSpec {
    pub fn modeled(type_id: u16, service_time_us: f64, instances: usize) -> Self {
        Self {
            type_id,
            kind: AcceleratorKind::modeled_us(service_time_us),
            instances,
            queue_capacity_bytes: DEFAULT_QUEUE_BYTES,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let AcceleratorKind::Modeled { service_time_us } = self.kind {
            if !(service_time_us > 0.0 && service_time_us.is_finite()) {
                return Err(format!(
                    "accelerator {}: service time must be positive",
                    self.type_id
                ));
            }
        }
        if self.instances == 0 {
            return Err(format!("accelerator {}: zero instances", self.type_id));
        }
        Ok(())
    }
}

/// Runs a real accelerator. Modeled accelerators produce an empty payload.
pub fn execute(
    kind: &AcceleratorKind,
    payload: &[u8],
    params: &[u8; PARAMETER_BYTES],
) -> Result<Vec<u8>, AcceleratorError> {
    match kind {
        AcceleratorKind::Echo => Ok(payload.to_vec()),
        AcceleratorKind::TopK => execute_topk(payload, params),
        AcceleratorKind::Logit => execute_logit(payload, params),
        AcceleratorKind::MinMax => execute_minmax(payload, params),
        AcceleratorKind::Modeled { .. } => Ok(Vec::new()),
    }
}

fn words(payload: &[u8]) -> Result<impl Iterator<Item = [u8; 4]> + '_, AcceleratorError> {
    if !payload.len().is_multiple_of(4) {
        return Err(AcceleratorError::Unaligned(payload.len()));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| c.try_into().expect("chunk of 4")))
}

fn floats(payload: &[u8]) -> Result<Vec<f32>, AcceleratorError> {
    Ok(words(payload)?.map(f32::from_be_bytes).collect())
}

fn encode_floats(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_be_bytes).collect()
}

/// Top-K parameter layout: K in parameter bytes 0..4, big-endian.
pub fn topk_params(k: u32) -> [u8; PARAMETER_BYTES] {
    let mut p = [0u8; PARAMETER_BYTES];
    p[..4].copy_from_slice(&k.to_be_bytes());
    p
}

/// The K largest signed integers, in descending order.
pub fn execute_topk(payload: &[u8], params: &[u8; PARAMETER_BYTES]) -> Result<Vec<u8>, AcceleratorError> {
    let mut values: Vec<i32> = words(payload)?.map(i32::from_be_bytes).collect();
    let k = u32::from_be_bytes(params[..4].try_into().expect("4 bytes"));
    if k == 0 || k as usize > values.len() {
        return Err(AcceleratorError::InvalidK { k, len: values.len() });
    }
    let k = k as usize;
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, |a, b| b.cmp(a));
        values.truncate(k);
    }
    values.sort_unstable_by(|a, b| b.cmp(a));
    Ok(values.into_iter().flat_map(i32::to_be_bytes).collect())
}

/// Elementwise `ln(x / (1 - x))` over floats in (0, 1).
pub fn execute_logit(payload: &[u8], _params: &[u8; PARAMETER_BYTES]) -> Result<Vec<u8>, AcceleratorError> {
    let xs = floats(payload)?;
    if let Some((index, &value)) = xs.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x < 1.0)) {
        return Err(AcceleratorError::OutOfDomain { index, value });
    }
    Ok(encode_floats(xs.into_iter().map(|x| {
        let x = f64::from(x);
        (x / (1.0 - x)).ln() as f32
    })))
}

/// Elementwise `(x - min) / (max - min)`; all zeros when the range is empty.
pub fn execute_minmax(payload: &[u8], _params: &[u8; PARAMETER_BYTES]) -> Result<Vec<u8>, AcceleratorError> {
    let xs = floats(payload)?;
    if xs.is_empty() {
        return Err(AcceleratorError::Empty);
    }
    if let Some(index) = xs.iter().position(|x| !x.is_finite()) {
        return Err(AcceleratorError::NotFinite { index });
    }
    let (lo, hi) = xs
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo == hi {
        return Ok(encode_floats(xs.iter().map(|_| 0.0)));
    }
    let (lo, range) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    Ok(encode_floats(xs.into_iter().map(|x| ((f64::from(x) - lo) / range) as f32)))
}

/// Fragments spanned by a request of `total_bytes` on the wire.
pub fn fragment_count(total_bytes: u64, fragment_bytes: u64) -> u64 {
    total_bytes.div_ceil(fragment_bytes).max(1)
}

/// Execution time of a modeled accelerator for one request.
pub fn model_service_time(per_fragment: Nanos, total_bytes: u64, fragment_bytes: u64) -> Nanos {
    Nanos(per_fragment.0 * fragment_count(total_bytes, fragment_bytes))
}

/// A request occupying a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Running {
    pub request: AssembledRequest,
    pub started_at: Nanos,
    pub finishes_at: Nanos,
}

/// One accelerator instance with its private queue of complete requests.
#[derive(Debug, Clone)]
pub struct AcceleratorSlot {
    pub slot_id: usize,
    pub type_id: u16,
    queue_capacity_bytes: u64,
    waiting_bytes: u64,
    queue: VecDeque<AssembledRequest>,
    running: Option<Running>,
    busy_time: Nanos,
    completed: u64,
}

impl AcceleratorSlot {
    pub fn new(slot_id: usize, type_id: u16, queue_capacity_bytes: u64) -> Self {
        Self {
            slot_id,
            type_id,
            queue_capacity_bytes,
            waiting_bytes: 0,
            queue: VecDeque::new(),
            running: None,
            busy_time: Nanos::ZERO,
            completed: 0,
        }
    }

    /// Bytes waiting plus the request in service; what JSQ compares.
    pub fn queued_bytes(&self) -> u64 {
        self.waiting_bytes + self.running.as_ref().map_or(0, |r| r.request.total_bytes())
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some()
    }

    pub fn running(&self) -> Option<&Running> {
        self.running.as_ref()
    }

    pub fn busy_time(&self) -> Nanos {
        self.busy_time
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Accepts the request if it fits; an empty queue takes any request so
    /// an oversized one cannot wedge the slot.
    pub fn try_enqueue(&mut self, request: AssembledRequest) -> Result<(), AssembledRequest> {
        let bytes = request.total_bytes();
        if !self.queue.is_empty() && self.waiting_bytes + bytes > self.queue_capacity_bytes {
            return Err(request);
        }
        self.waiting_bytes += bytes;
        self.queue.push_back(request);
        Ok(())
    }

    /// If idle, starts the head request and returns when it will finish.
    /// Never preempts a running request.
    pub fn slot_tick<F>(&mut self, now: Nanos, service_time: F) -> Option<&Running>
    where
        F: FnOnce(&AssembledRequest) -> Nanos,
    {
        if self.running.is_some() {
            return None;
        }
        let request = self.queue.pop_front()?;
        self.waiting_bytes -= request.total_bytes();
        let finishes_at = now + service_time(&request);
        self.running = Some(Running {
            request,
            started_at: now,
            finishes_at,
        });
        self.running.as_ref()
    }

    /// Retires the running request. Panics if the slot is idle.
    pub fn finish(&mut self) -> Running {
        let run = self.running.take().expect("finish on an idle slot");
        self.busy_time += run.finishes_at - run.started_at;
        self.completed += 1;
        run
    }
}

/// Expands an accelerator table into slots, in table order.
pub fn build_slots(table: &[AcceleratorSpec]) -> Vec<AcceleratorSlot> {
    table
        .iter()
        .flat_map(|spec| (0..spec.instances).map(move |_| spec))
        .enumerate()
        .map(|(i, spec)| AcceleratorSlot::new(i, spec.type_id, spec.queue_capacity_bytes))
        .collect()
}
