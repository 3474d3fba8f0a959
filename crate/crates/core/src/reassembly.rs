//! Reassembly buffer pool.
//!
//! Each buffer is a FIFO that assembles one request at a time. A buffer that
//! is mid-assembly is owned by a single connection and cannot accept the first
//! fragment of any other request; once the last fragment arrives the buffer
//! becomes eligible again even though the assembled request may still sit in
//! it waiting for room in an accelerator queue. Requests that fit in a single
//! fragment can bypass the buffers through an optional single-fragment queue.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Nanos;
use crate::policies::{BufferInputPolicy, BufferInputPolicyKind, BufferView};
use crate::protocol::{decode_header, Fragment, ProtocolError, RequestHeader, REQUEST_HEADER_BYTES};

pub const DEFAULT_BUFFER_BYTES: u64 = 256 * 1024;
pub const DEFAULT_BUFFER_COUNT: usize = 4;
pub const DEFAULT_SINGLE_FRAGMENT_BYTES: u64 = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReassemblyError {
    #[error("malformed request header: {0}")]
    Malformed(#[from] ProtocolError),
    #[error("fragment of {fragment} bytes exceeds the {remaining} bytes the request still expects")]
    Overrun { fragment: u64, remaining: u64 },
    #[error("first fragment shorter than a request header")]
    ShortFirstFragment,
    #[error("expected a first fragment")]
    NotFirst,
    #[error("expected a continuation fragment")]
    NotContinuation,
    #[error("connection {0} is already assembling a request")]
    ConnectionBusy(u32),
    #[error("fragment for connection {0} matches no request being assembled")]
    Orphan(u32),
}

impl ReassemblyError {
    /// Protocol violations as opposed to expected stray fragments.
    pub fn is_malformed(&self) -> bool {
        !matches!(self, ReassemblyError::Orphan(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Capacity of each reassembly buffer in bytes.
    pub buffer_bytes: Vec<u64>,
    /// Capacity of the single-fragment queue; `None` disables it.
    #[serde(default)]
    pub single_fragment_bytes: Option<u64>,
    /// Per-accelerator mode: buffer `i` only takes requests for
    /// `bindings[i]`. `None` means buffers are shared by all accelerators.
    #[serde(default)]
    pub bindings: Option<Vec<u16>>,
    pub input_policy: BufferInputPolicyKind,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            buffer_bytes: vec![DEFAULT_BUFFER_BYTES; DEFAULT_BUFFER_COUNT],
            single_fragment_bytes: Some(DEFAULT_SINGLE_FRAGMENT_BYTES),
            bindings: None,
            input_policy: BufferInputPolicyKind::EligibleRr,
        }
    }
}

impl PoolConfig {
    pub fn uniform(count: usize, bytes: u64, input_policy: BufferInputPolicyKind) -> Self {
        Self {
            buffer_bytes: vec![bytes; count],
            single_fragment_bytes: None,
            bindings: None,
            input_policy,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.buffer_bytes.is_empty() && self.single_fragment_bytes.is_none() {
            return Err("pool needs at least one buffer".into());
        }
        if let Some(b) = &self.bindings {
            if b.len() != self.buffer_bytes.len() {
                return Err(format!(
                    "{} bindings for {} buffers",
                    b.len(),
                    self.buffer_bytes.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferState {
    Idle,
    Assembling { connection_id: u32, bytes_remaining: u64 },
    HoldingComplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BufferIndex {
    Reassembly(usize),
    SingleFragment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accepted(BufferIndex),
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Continuation {
    Progress { bytes_remaining: u64 },
    Completed(BufferIndex),
}

/// A complete request, ready for an accelerator queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledRequest {
    pub header: RequestHeader,
    pub connection_id: u32,
    /// Request bytes after the header; exactly `header.payload_bytes()` long.
    pub payload: Vec<u8>,
    pub first_fragment_at: Nanos,
    pub assembled_at: Nanos,
    pub source: BufferIndex,
}

impl AssembledRequest {
    pub fn total_bytes(&self) -> u64 {
        self.header.total_bytes()
    }
}

#[derive(Debug, Clone)]
struct Entry {
    header: RequestHeader,
    connection_id: u32,
    /// Raw request bytes received so far, header included.
    data: Vec<u8>,
    first_fragment_at: Nanos,
    assembled_at: Option<Nanos>,
}

impl Entry {
    fn bytes(&self) -> u64 {
        self.data.len() as u64
    }

    fn is_complete(&self) -> bool {
        self.assembled_at.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ReassemblyBuffer {
    capacity_bytes: u64,
    used_bytes: u64,
    state: BufferState,
    contents: VecDeque<Entry>,
}

impl ReassemblyBuffer {
    fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            used_bytes: 0,
            state: BufferState::Idle,
            contents: VecDeque::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }

    pub fn state(&self) -> BufferState {
        self.state
    }

    pub fn is_assembling(&self) -> bool {
        matches!(self.state, BufferState::Assembling { .. })
    }

    fn settle_state(&mut self) {
        if !self.is_assembling() {
            self.state = if self.contents.is_empty() {
                BufferState::Idle
            } else {
                BufferState::HoldingComplete
            };
        }
    }

    fn pop_front(&mut self) -> Entry {
        let e = self.contents.pop_front().expect("front exists");
        self.used_bytes -= e.bytes();
        self.settle_state();
        e
    }

    fn push_front(&mut self, e: Entry) {
        self.used_bytes += e.bytes();
        self.contents.push_front(e);
        self.settle_state();
    }
}

#[derive(Debug, Clone)]
struct SingleFragmentQueue {
    capacity_bytes: u64,
    used_bytes: u64,
    queue: VecDeque<Entry>,
}

/// Byte and request counters. At any instant
/// `offered == delivered + dropped + garbage_collected + resident`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub offered_bytes: u64,
    pub delivered_bytes: u64,
    /// Rejected first fragments plus orphan continuations.
    pub dropped_bytes: u64,
    pub garbage_collected_bytes: u64,
    pub orphan_bytes: u64,
    pub accepted_requests: u64,
    pub dropped_requests: u64,
    pub completed_requests: u64,
    pub delivered_requests: u64,
    pub orphan_fragments: u64,
    pub single_fragment_admissions: u64,
}

/// One mutation of the pool, recorded so a decision sequence can be replayed
/// against a fresh pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    First {
        connection_id: u32,
        header: [u8; REQUEST_HEADER_BYTES],
        len: usize,
        at: Nanos,
        outcome: Result<Admission, ReassemblyError>,
    },
    Continuation {
        connection_id: u32,
        len: usize,
        at: Nanos,
        outcome: Result<Continuation, ReassemblyError>,
    },
    Collect {
        connection_id: u32,
        freed: u64,
    },
    /// `(connection_id, placed)` for each complete request offered, in
    /// offer order.
    Dispatch {
        offered: Vec<(u32, bool)>,
    },
}

#[derive(Debug, Clone)]
pub struct ReassemblyPool {
    buffers: Vec<ReassemblyBuffer>,
    bindings: Option<Vec<u16>>,
    single: Option<SingleFragmentQueue>,
    policy: BufferInputPolicy,
    owners: BTreeMap<u32, usize>,
    stats: PoolStats,
    trace: Option<Vec<TraceOp>>,
}

impl ReassemblyPool {
    pub fn new(config: &PoolConfig) -> Self {
        Self {
            buffers: config
                .buffer_bytes
                .iter()
                .map(|&c| ReassemblyBuffer::new(c))
                .collect(),
            bindings: config.bindings.clone(),
            single: config.single_fragment_bytes.map(|c| SingleFragmentQueue {
                capacity_bytes: c,
                used_bytes: 0,
                queue: VecDeque::new(),
            }),
            policy: BufferInputPolicy::new(config.input_policy),
            owners: BTreeMap::new(),
            stats: PoolStats::default(),
            trace: None,
        }
    }

    pub fn record_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceOp> {
        self.trace.take().unwrap_or_default()
    }

    pub fn buffers(&self) -> &[ReassemblyBuffer] {
        &self.buffers
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn single_fragment_used(&self) -> u64 {
        self.single.as_ref().map_or(0, |s| s.used_bytes)
    }

    pub fn resident_bytes(&self) -> u64 {
        self.buffers.iter().map(|b| b.used_bytes).sum::<u64>() + self.single_fragment_used()
    }

    /// Buffer currently assembling a request for `connection_id`.
    pub fn owner_of(&self, connection_id: u32) -> Option<usize> {
        self.owners.get(&connection_id).copied()
    }

    pub fn has_complete(&self) -> bool {
        self.buffers
            .iter()
            .any(|b| b.contents.front().is_some_and(Entry::is_complete))
            || self.single.as_ref().is_some_and(|s| !s.queue.is_empty())
    }

    pub fn offer_first_fragment(
        &mut self,
        frag: &Fragment,
        now: Nanos,
    ) -> Result<Admission, ReassemblyError> {
        let outcome = self.first_fragment(frag, now);
        if let Some(trace) = &mut self.trace {
            let mut header = [0u8; REQUEST_HEADER_BYTES];
            let n = frag.payload.len().min(REQUEST_HEADER_BYTES);
            header[..n].copy_from_slice(&frag.payload[..n]);
            trace.push(TraceOp::First {
                connection_id: frag.connection_id,
                header,
                len: frag.payload.len(),
                at: now,
                outcome: outcome.clone(),
            });
        }
        outcome
    }

    fn first_fragment(&mut self, frag: &Fragment, now: Nanos) -> Result<Admission, ReassemblyError> {
        if !frag.is_first {
            return Err(ReassemblyError::NotFirst);
        }
        if frag.payload.len() < REQUEST_HEADER_BYTES {
            return Err(ReassemblyError::ShortFirstFragment);
        }
        let header = decode_header(&frag.payload[..REQUEST_HEADER_BYTES])?;
        let total = header.total_bytes();
        let len = frag.payload.len() as u64;
        if len > total {
            return Err(ReassemblyError::Overrun {
                fragment: len,
                remaining: total,
            });
        }
        if self.owners.contains_key(&frag.connection_id) {
            return Err(ReassemblyError::ConnectionBusy(frag.connection_id));
        }
        self.stats.offered_bytes += len;

        let entry = Entry {
            header,
            connection_id: frag.connection_id,
            data: frag.payload.clone(),
            first_fragment_at: now,
            assembled_at: (len == total).then_some(now),
        };

        if len == total {
            if let Some(single) = &mut self.single {
                if single.capacity_bytes - single.used_bytes >= total {
                    single.used_bytes += total;
                    single.queue.push_back(entry);
                    self.stats.accepted_requests += 1;
                    self.stats.completed_requests += 1;
                    self.stats.single_fragment_admissions += 1;
                    return Ok(Admission::Accepted(BufferIndex::SingleFragment));
                }
            }
        }

        let views: Vec<BufferView> = self
            .buffers
            .iter()
            .enumerate()
            .map(|(i, b)| BufferView {
                eligible: !b.is_assembling()
                    && self
                        .bindings
                        .as_ref()
                        .is_none_or(|bind| bind[i] == header.accelerator_id),
                free_bytes: b.free_bytes(),
            })
            .collect();
        let pick = self
            .policy
            .pick_buffer(&views, total)
            .filter(|&i| views[i].eligible && views[i].free_bytes >= total);

        let Some(i) = pick else {
            self.stats.dropped_bytes += len;
            self.stats.dropped_requests += 1;
            return Ok(Admission::Dropped);
        };

        let buf = &mut self.buffers[i];
        buf.used_bytes += len;
        self.stats.accepted_requests += 1;
        if entry.is_complete() {
            self.stats.completed_requests += 1;
            buf.contents.push_back(entry);
            buf.settle_state();
        } else {
            buf.state = BufferState::Assembling {
                connection_id: frag.connection_id,
                bytes_remaining: total - len,
            };
            buf.contents.push_back(entry);
            self.owners.insert(frag.connection_id, i);
        }
        Ok(Admission::Accepted(BufferIndex::Reassembly(i)))
    }

    pub fn offer_continuation(
        &mut self,
        frag: &Fragment,
        now: Nanos,
    ) -> Result<Continuation, ReassemblyError> {
        let outcome = self.continuation(frag, now);
        if let Some(trace) = &mut self.trace {
            trace.push(TraceOp::Continuation {
                connection_id: frag.connection_id,
                len: frag.payload.len(),
                at: now,
                outcome: outcome.clone(),
            });
        }
        outcome
    }

    fn continuation(&mut self, frag: &Fragment, now: Nanos) -> Result<Continuation, ReassemblyError> {
        if frag.is_first {
            return Err(ReassemblyError::NotContinuation);
        }
        let len = frag.payload.len() as u64;
        let Some(&i) = self.owners.get(&frag.connection_id) else {
            self.stats.offered_bytes += len;
            self.stats.dropped_bytes += len;
            self.stats.orphan_bytes += len;
            self.stats.orphan_fragments += 1;
            return Err(ReassemblyError::Orphan(frag.connection_id));
        };
        let BufferState::Assembling { bytes_remaining, .. } = self.buffers[i].state else {
            unreachable!("owned buffer must be assembling");
        };
        self.stats.offered_bytes += len;
        if len > bytes_remaining {
            // Count the offending fragment as dropped and discard the partial
            // request it claimed to extend.
            self.stats.dropped_bytes += len;
            self.collect(frag.connection_id);
            return Err(ReassemblyError::Overrun {
                fragment: len,
                remaining: bytes_remaining,
            });
        }

        let buf = &mut self.buffers[i];
        buf.used_bytes += len;
        let entry = buf.contents.back_mut().expect("assembling entry");
        entry.data.extend_from_slice(&frag.payload);
        let remaining = bytes_remaining - len;
        if remaining > 0 {
            buf.state = BufferState::Assembling {
                connection_id: frag.connection_id,
                bytes_remaining: remaining,
            };
            return Ok(Continuation::Progress {
                bytes_remaining: remaining,
            });
        }
        entry.assembled_at = Some(now);
        buf.state = BufferState::HoldingComplete;
        self.owners.remove(&frag.connection_id);
        self.stats.completed_requests += 1;
        Ok(Continuation::Completed(BufferIndex::Reassembly(i)))
    }

    /// Discards the partial request of a closed connection. Returns the
    /// number of bytes freed (zero if the connection owned nothing).
    pub fn garbage_collect(&mut self, connection_id: u32) -> u64 {
        let freed = self.collect(connection_id);
        if let Some(trace) = &mut self.trace {
            trace.push(TraceOp::Collect {
                connection_id,
                freed,
            });
        }
        freed
    }

    fn collect(&mut self, connection_id: u32) -> u64 {
        let Some(i) = self.owners.remove(&connection_id) else {
            return 0;
        };
        let buf = &mut self.buffers[i];
        let partial = buf.contents.pop_back().expect("assembling entry");
        debug_assert!(!partial.is_complete());
        let freed = partial.bytes();
        buf.used_bytes -= freed;
        buf.state = BufferState::Idle;
        buf.settle_state();
        self.stats.garbage_collected_bytes += freed;
        freed
    }

    /// Offers complete requests to `place` in order of completion time
    /// (ties by buffer index, the single-fragment queue last). A request that
    /// `place` hands back stays at the head of its buffer and blocks the rest
    /// of that buffer for this round. Returns the number placed.
    pub fn dispatch_complete<F>(&mut self, mut place: F) -> usize
    where
        F: FnMut(AssembledRequest) -> Result<(), AssembledRequest>,
    {
        let sources = self.buffers.len() + usize::from(self.single.is_some());
        let mut blocked = vec![false; sources];
        let mut outcomes = Vec::new();
        loop {
            let next = (0..sources)
                .filter(|&s| !blocked[s])
                .filter_map(|s| self.front_completed_at(s).map(|t| (t, s)))
                .min();
            let Some((_, source)) = next else { break };
            let (entry, index) = self.pop_source(source);
            let request = into_request(entry, index);
            let connection_id = request.connection_id;
            match place(request) {
                Ok(()) => outcomes.push((connection_id, true)),
                Err(request) => {
                    blocked[source] = true;
                    self.push_back_source(source, from_request(request));
                    outcomes.push((connection_id, false));
                }
            }
        }
        let placed = outcomes.iter().filter(|o| o.1).count();
        if let Some(trace) = &mut self.trace {
            if !outcomes.is_empty() {
                trace.push(TraceOp::Dispatch { offered: outcomes });
            }
        }
        placed
    }

    /// Removes and returns every complete request, FIFO within each buffer.
    pub fn drain_complete(&mut self) -> Vec<AssembledRequest> {
        let mut out = Vec::new();
        self.dispatch_complete(|r| {
            out.push(r);
            Ok(())
        });
        out
    }

    fn front_completed_at(&self, source: usize) -> Option<Nanos> {
        let front = if source < self.buffers.len() {
            self.buffers[source].contents.front()
        } else {
            self.single.as_ref().and_then(|s| s.queue.front())
        };
        front.and_then(|e| e.assembled_at)
    }

    fn pop_source(&mut self, source: usize) -> (Entry, BufferIndex) {
        let entry = if source < self.buffers.len() {
            self.buffers[source].pop_front()
        } else {
            let single = self.single.as_mut().expect("single queue");
            let e = single.queue.pop_front().expect("front exists");
            single.used_bytes -= e.bytes();
            e
        };
        self.stats.delivered_bytes += entry.bytes();
        self.stats.delivered_requests += 1;
        let index = if source < self.buffers.len() {
            BufferIndex::Reassembly(source)
        } else {
            BufferIndex::SingleFragment
        };
        (entry, index)
    }

    fn push_back_source(&mut self, source: usize, entry: Entry) {
        self.stats.delivered_bytes -= entry.bytes();
        self.stats.delivered_requests -= 1;
        if source < self.buffers.len() {
            self.buffers[source].push_front(entry);
        } else {
            let single = self.single.as_mut().expect("single queue");
            single.used_bytes += entry.bytes();
            single.queue.push_front(entry);
        }
    }

    /// Checks the structural invariants; used by tests and debug runs.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, b) in self.buffers.iter().enumerate() {
            let used: u64 = b.contents.iter().map(Entry::bytes).sum();
            if used != b.used_bytes {
                return Err(format!("buffer {i}: used {} != contents {used}", b.used_bytes));
            }
            if b.used_bytes > b.capacity_bytes {
                return Err(format!("buffer {i}: over capacity"));
            }
            let partial: Vec<_> = b
                .contents
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.is_complete())
                .collect();
            match (b.state, partial.as_slice()) {
                (BufferState::Idle, []) if b.contents.is_empty() => {}
                (BufferState::HoldingComplete, []) if !b.contents.is_empty() => {}
                (
                    BufferState::Assembling {
                        connection_id,
                        bytes_remaining,
                    },
                    [(pos, e)],
                ) => {
                    if *pos != b.contents.len() - 1 {
                        return Err(format!("buffer {i}: partial request not at the tail"));
                    }
                    if e.connection_id != connection_id || bytes_remaining == 0 {
                        return Err(format!("buffer {i}: inconsistent assembling state"));
                    }
                    if e.bytes() + bytes_remaining != e.header.total_bytes() {
                        return Err(format!("buffer {i}: remaining bytes mismatch"));
                    }
                    if self.owners.get(&connection_id) != Some(&i) {
                        return Err(format!("buffer {i}: owner map disagrees"));
                    }
                }
                (state, _) => return Err(format!("buffer {i}: state {state:?} vs contents")),
            }
            for e in b.contents.iter().filter(|e| e.is_complete()) {
                if e.bytes() != e.header.total_bytes() {
                    return Err(format!("buffer {i}: complete request with wrong length"));
                }
            }
        }
        if let Some(s) = &self.single {
            if s.used_bytes > s.capacity_bytes
                || s.used_bytes != s.queue.iter().map(Entry::bytes).sum::<u64>()
            {
                return Err("single-fragment queue accounting".into());
            }
        }
        let st = self.stats;
        if st.offered_bytes
            != st.delivered_bytes + st.dropped_bytes + st.garbage_collected_bytes + self.resident_bytes()
        {
            return Err(format!("byte conservation violated: {st:?}, resident {}", self.resident_bytes()));
        }
        Ok(())
    }
}

fn into_request(e: Entry, source: BufferIndex) -> AssembledRequest {
    let mut data = e.data;
    data.drain(..REQUEST_HEADER_BYTES);
    assert_eq!(
        data.len() as u64,
        e.header.payload_bytes(),
        "assembled payload length must match the header"
    );
    AssembledRequest {
        header: e.header,
        connection_id: e.connection_id,
        payload: data,
        first_fragment_at: e.first_fragment_at,
        assembled_at: e.assembled_at.expect("complete"),
        source,
    }
}

fn from_request(r: AssembledRequest) -> Entry {
    let mut data = Vec::with_capacity(REQUEST_HEADER_BYTES + r.payload.len());
    data.extend_from_slice(&r.header.encode());
    data.extend_from_slice(&r.payload);
    Entry {
        header: r.header,
        connection_id: r.connection_id,
        data,
        first_fragment_at: r.first_fragment_at,
        assembled_at: Some(r.assembled_at),
    }
}
