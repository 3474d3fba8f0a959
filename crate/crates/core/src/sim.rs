//! Discrete-event model of one node: clients send fragments into the
//! reassembly pool, the selector moves complete requests into per-slot
//! accelerator queues and slots run them to completion.
//!
//! Time is virtual and the run is a pure function of `(config, seed)`.
//! The simulator tags every request with its record index in the opaque
//! header parameters, which the modeled accelerators ignore.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accelerators::{build_slots, fragment_count, AcceleratorKind, AcceleratorSlot, AcceleratorSpec};
use crate::engine::{Engine, Nanos};
use crate::policies::{QueueView, SelectorPolicy, SelectorPolicyKind};
use crate::protocol::{Fragment, RequestHeader, REQUEST_HEADER_BYTES};
use crate::reassembly::{
    Admission, Continuation, PoolConfig, PoolStats, ReassemblyError, ReassemblyPool, TraceOp,
};
use crate::workload::{ArrivalMode, Client, ClientAction, LatencyStart, Outcome, WorkloadConfig, WorkloadError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid pool: {0}")]
    Pool(String),
    #[error("invalid accelerator table: {0}")]
    Accelerators(String),
    #[error("request mix names accelerator {0}, which has no slot")]
    UnknownAccelerator(u16),
    #[error("accelerator {0} is not modeled; the simulator only runs modeled accelerators")]
    NotModeled(u16),
}

/// How fragments reach an accelerator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    /// Through the reassembly pool; accelerators see complete requests.
    #[default]
    Reassembled,
    /// Straight into an idle slot, which stays reserved until the last
    /// fragment has been processed. A first fragment that finds no idle slot
    /// of its type is declined.
    Immediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub workload: WorkloadConfig,
    pub pool: PoolConfig,
    pub accelerators: Vec<AcceleratorSpec>,
    pub selector: SelectorPolicyKind,
    #[serde(default)]
    pub ingest: IngestMode,
    /// Stop after this much virtual time; otherwise run until every client
    /// is done.
    #[serde(default)]
    pub horizon_us: Option<f64>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.workload.validate()?;
        self.pool.validate().map_err(SimError::Pool)?;
        if self.accelerators.is_empty() {
            return Err(SimError::Accelerators("empty".into()));
        }
        for spec in &self.accelerators {
            spec.validate().map_err(SimError::Accelerators)?;
            if !matches!(spec.kind, AcceleratorKind::Modeled { .. }) {
                return Err(SimError::NotModeled(spec.type_id));
            }
        }
        for &(id, _) in &self.workload.request_mix {
            if !self.accelerators.iter().any(|a| a.type_id == id) {
                return Err(SimError::UnknownAccelerator(id));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> Option<Nanos> {
        self.horizon_us.map(Nanos::from_micros_f64)
    }
}

/// Everything observed about one request (all attempts of it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub client: u32,
    pub accelerator_id: u16,
    pub fragments: u32,
    pub total_bytes: u64,
    /// First-fragment send time of the first attempt.
    pub first_sent_at: Nanos,
    pub last_sent_at: Option<Nanos>,
    pub attempts: u32,
    pub drops: u32,
    pub assembled_at: Option<Nanos>,
    pub service_start: Option<Nanos>,
    pub service_end: Option<Nanos>,
    /// Time the accelerator spends processing; occupancy may be longer in
    /// immediate mode, where the slot waits for fragments.
    pub service_time: Nanos,
    pub slot: Option<usize>,
    pub latency: Option<Nanos>,
}

impl RequestRecord {
    pub fn completed(&self) -> bool {
        self.service_end.is_some()
    }

    /// Time from assembly completion to service start.
    pub fn queue_wait(&self) -> Option<Nanos> {
        Some(self.service_start?.saturating_sub(self.assembled_at?))
    }

    /// Time the slot was held by this request.
    pub fn occupancy(&self) -> Option<Nanos> {
        Some(self.service_end? - self.service_start?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub records: Vec<RequestRecord>,
    /// Virtual time at which the run ended.
    pub makespan: Nanos,
    pub slot_types: Vec<u16>,
    pub slot_busy: Vec<Nanos>,
    pub pool: PoolStats,
    pub events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    FragmentArrival { client: u32, index: u32 },
    RetryTimer { client: u32 },
    SlotCompletion { slot: usize },
}

#[derive(Debug, Clone, Copy)]
struct ImmediateJob {
    record: usize,
    fragments: u32,
    received: u32,
    processed_until: Nanos,
}

struct Node<'a> {
    cfg: &'a SimConfig,
    pool: ReassemblyPool,
    selector: SelectorPolicy,
    slots: Vec<AcceleratorSlot>,
    per_fragment: Vec<Nanos>,
    immediate: Vec<Option<ImmediateJob>>,
    immediate_busy: Vec<Nanos>,
    clients: Vec<Client>,
    current: Vec<Option<usize>>,
    records: Vec<RequestRecord>,
}

fn record_id(header: &RequestHeader) -> usize {
    u64::from_be_bytes(header.parameters[..8].try_into().expect("8 bytes")) as usize
}

/// Runs one simulation.
pub fn run(config: &SimConfig, seed: u64) -> Result<SimResult, SimError> {
    config.validate()?;
    let slots = build_slots(&config.accelerators);
    let per_fragment = config
        .accelerators
        .iter()
        .flat_map(|a| (0..a.instances).map(move |_| a.kind.service_time_per_fragment().expect("modeled")))
        .collect();
    let clients = (0..config.workload.clients as u32)
        .map(|id| Client::new(id, &config.workload, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let n_slots = slots.len();
    let mut node = Node {
        cfg: config,
        pool: ReassemblyPool::new(&config.pool),
        selector: SelectorPolicy::new(config.selector),
        slots,
        per_fragment,
        immediate: vec![None; n_slots],
        immediate_busy: vec![Nanos::ZERO; n_slots],
        current: vec![None; clients.len()],
        clients,
        records: Vec::new(),
    };
    let mut engine = Engine::new();
    for c in 0..node.clients.len() as u32 {
        let gap = node.clients[c as usize].fragment_gap(&config.workload);
        node.start_request(&mut engine, c, gap);
    }
    let (end, _) = engine.run_until(config.horizon(), |eng, ev| node.handle(eng, ev));
    let slot_busy = match config.ingest {
        IngestMode::Reassembled => node.slots.iter().map(AcceleratorSlot::busy_time).collect(),
        IngestMode::Immediate => node.immediate_busy.clone(),
    };
    Ok(SimResult {
        makespan: end,
        slot_types: node.slots.iter().map(|s| s.type_id).collect(),
        slot_busy,
        pool: node.pool.stats(),
        events: engine.dispatched(),
        records: node.records,
    })
}

impl Node<'_> {
    fn workload(&self) -> &WorkloadConfig {
        &self.cfg.workload
    }

    fn start_request(&mut self, engine: &mut Engine<Event>, client: u32, delay: Nanos) {
        let c = client as usize;
        if self.clients[c].remaining() == 0 {
            return;
        }
        let now = engine.now();
        let plan = self.clients[c].next_request(&self.cfg.workload, now);
        let id = self.records.len();
        let mut header = plan.header;
        header.parameters[..8].copy_from_slice(&(id as u64).to_be_bytes());
        self.records.push(RequestRecord {
            client,
            accelerator_id: header.accelerator_id,
            fragments: plan.fragments,
            total_bytes: header.total_bytes(),
            first_sent_at: now + delay,
            last_sent_at: None,
            attempts: 0,
            drops: 0,
            assembled_at: None,
            service_start: None,
            service_end: None,
            service_time: Nanos::ZERO,
            slot: None,
            latency: None,
        });
        self.current[c] = Some(id);
        engine.schedule(delay, Event::FragmentArrival { client, index: 0 });
    }

    fn handle(&mut self, engine: &mut Engine<Event>, event: Event) {
        match event {
            Event::FragmentArrival { client, index } => self.on_fragment(engine, client, index),
            Event::RetryTimer { client } => self.on_fragment(engine, client, 0),
            Event::SlotCompletion { slot } => self.on_completion(engine, slot),
        }
    }

    fn fragment(&self, client: u32, record: usize, index: u32) -> Fragment {
        let r = &self.records[record];
        let fb = self.workload().fragment_bytes;
        let offset = u64::from(index) * fb;
        let len = fb.min(r.total_bytes - offset) as usize;
        if index == 0 {
            let mut header = self.cfg.workload.header(r.accelerator_id, r.fragments);
            header.parameters[..8].copy_from_slice(&(record as u64).to_be_bytes());
            let mut payload = header.encode().to_vec();
            payload.resize(len, 0);
            Fragment::first(client, payload)
        } else {
            Fragment::continuation(client, vec![0; len])
        }
    }

    fn on_fragment(&mut self, engine: &mut Engine<Event>, client: u32, index: u32) {
        let now = engine.now();
        let c = client as usize;
        let rec = self.current[c].expect("client has a request");
        let fragments = self.records[rec].fragments;
        if index == 0 {
            self.clients[c].mark_first_sent(now);
            let r = &mut self.records[rec];
            if r.attempts == 0 {
                r.first_sent_at = now;
            }
            r.attempts += 1;
        }
        let last = index + 1 == fragments;
        if last {
            self.records[rec].last_sent_at = Some(now);
            self.clients[c].mark_last_sent(now);
        }

        let accepted = match self.cfg.ingest {
            IngestMode::Reassembled => self.offer_to_pool(client, rec, index, now),
            IngestMode::Immediate => self.offer_immediate(engine, rec, index, now),
        };
        if !accepted {
            self.records[rec].drops += 1;
            self.records[rec].last_sent_at = None;
            match self.workload().arrival {
                ArrivalMode::ClosedLoop => {
                    match self.clients[c].on_response(&self.cfg.workload, Outcome::Dropped, now) {
                        ClientAction::Retry { after } => {
                            engine.schedule(after, Event::RetryTimer { client });
                        }
                        action => unreachable!("closed-loop drop yields a retry, got {action:?}"),
                    }
                }
                ArrivalMode::Streaming => self.stream_next(engine, client),
            }
            return;
        }

        if !last {
            let gap = self.clients[c].fragment_gap(&self.cfg.workload);
            engine.schedule(gap, Event::FragmentArrival { client, index: index + 1 });
        } else if self.workload().arrival == ArrivalMode::Streaming {
            self.stream_next(engine, client);
        }
        if self.cfg.ingest == IngestMode::Reassembled {
            self.dispatch(engine);
        }
    }

    fn stream_next(&mut self, engine: &mut Engine<Event>, client: u32) {
        let c = client as usize;
        self.clients[c].release();
        self.current[c] = None;
        let gap = self.clients[c].fragment_gap(&self.cfg.workload);
        self.start_request(engine, client, gap);
    }

    fn offer_to_pool(&mut self, client: u32, rec: usize, index: u32, now: Nanos) -> bool {
        let frag = self.fragment(client, rec, index);
        if index == 0 {
            match self.pool.offer_first_fragment(&frag, now) {
                Ok(Admission::Accepted(_)) => true,
                Ok(Admission::Dropped) => false,
                Err(e) => panic!("simulator produced an invalid first fragment: {e}"),
            }
        } else {
            match self.pool.offer_continuation(&frag, now) {
                Ok(Continuation::Progress { .. } | Continuation::Completed(_)) => true,
                Err(ReassemblyError::Orphan(_)) => unreachable!("simulated clients never send orphans"),
                Err(e) => panic!("simulator produced an invalid continuation: {e}"),
            }
        }
    }

    fn offer_immediate(&mut self, engine: &mut Engine<Event>, rec: usize, index: u32, now: Nanos) -> bool {
        let accel = self.records[rec].accelerator_id;
        let slot = if index == 0 {
            let free = (0..self.slots.len()).find(|&s| self.slots[s].type_id == accel && self.immediate[s].is_none());
            let Some(s) = free else { return false };
            self.immediate[s] = Some(ImmediateJob {
                record: rec,
                fragments: self.records[rec].fragments,
                received: 0,
                processed_until: now,
            });
            let r = &mut self.records[rec];
            r.service_start = Some(now);
            r.slot = Some(s);
            s
        } else {
            self.records[rec].slot.expect("reserved slot")
        };
        let per = self.per_fragment[slot];
        let job = self.immediate[slot].as_mut().expect("reserved slot");
        job.processed_until = job.processed_until.max(now) + per;
        job.received += 1;
        if job.received == job.fragments {
            let done = job.processed_until;
            let r = &mut self.records[rec];
            r.assembled_at = Some(now);
            r.service_time = Nanos(per.0 * u64::from(job.fragments));
            engine.schedule_at(done, Event::SlotCompletion { slot });
        }
        true
    }

    fn service_time(&self, slot: usize, total_bytes: u64) -> Nanos {
        Nanos(self.per_fragment[slot].0 * fragment_count(total_bytes, self.workload().fragment_bytes))
    }

    fn dispatch(&mut self, engine: &mut Engine<Event>) {
        let now = engine.now();
        let slots = &mut self.slots;
        let selector = &mut self.selector;
        self.pool.dispatch_complete(|req| {
            let views: Vec<QueueView> = slots
                .iter()
                .map(|s| QueueView {
                    accelerator_id: s.type_id,
                    queued_bytes: s.queued_bytes(),
                })
                .collect();
            let pick = selector
                .pick_accelerator_queue(req.header.accelerator_id, &views)
                .expect("request mix validated against the accelerator table");
            slots[pick].try_enqueue(req)
        });
        for s in 0..self.slots.len() {
            if self.slots[s].is_busy() {
                continue;
            }
            let (per, fb) = (self.per_fragment[s], self.cfg.workload.fragment_bytes);
            let Some(run) = self.slots[s].slot_tick(now, |r| Nanos(per.0 * fragment_count(r.total_bytes(), fb))) else {
                continue;
            };
            let rec = record_id(&run.request.header);
            let finishes_at = run.finishes_at;
            let assembled_at = run.request.assembled_at;
            debug_assert_eq!(finishes_at - now, self.service_time(s, self.records[rec].total_bytes));
            let r = &mut self.records[rec];
            r.assembled_at = Some(assembled_at);
            r.service_start = Some(now);
            r.service_time = finishes_at - now;
            r.slot = Some(s);
            engine.schedule_at(finishes_at, Event::SlotCompletion { slot: s });
        }
    }

    fn on_completion(&mut self, engine: &mut Engine<Event>, slot: usize) {
        let now = engine.now();
        let rec = match self.cfg.ingest {
            IngestMode::Reassembled => record_id(&self.slots[slot].finish().request.header),
            IngestMode::Immediate => {
                let job = self.immediate[slot].take().expect("reserved slot");
                self.immediate_busy[slot] += self.records[job.record].service_time;
                job.record
            }
        };
        let r = &mut self.records[rec];
        r.service_end = Some(now);
        let start = match self.cfg.workload.latency_start {
            LatencyStart::FirstFragment => r.first_sent_at,
            LatencyStart::LastFragment => r.last_sent_at.unwrap_or(r.first_sent_at),
        };
        r.latency = Some(now - start);
        let client = r.client;
        if self.workload().arrival == ArrivalMode::ClosedLoop {
            let c = client as usize;
            if let ClientAction::Next = self.clients[c].on_response(&self.cfg.workload, Outcome::Ok, now) {
                self.current[c] = None;
                self.start_request(engine, client, Nanos::ZERO);
            }
        }
        if self.cfg.ingest == IngestMode::Reassembled {
            self.dispatch(engine);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("trace diverges at operation {index}: recorded {recorded}, replayed {replayed}")]
pub struct ReplayDivergence {
    pub index: usize,
    pub recorded: String,
    pub replayed: String,
}

/// Feeds a recorded sequence of pool operations to a fresh pool built from
/// `config` and checks every admission, continuation, collection and
/// placement outcome matches. Returns the number of operations replayed.
pub fn replay_pool_trace(config: &PoolConfig, trace: &[TraceOp]) -> Result<usize, ReplayDivergence> {
    let mut pool = ReassemblyPool::new(config);
    let diverge = |index: usize, recorded: &dyn std::fmt::Debug, replayed: &dyn std::fmt::Debug| ReplayDivergence {
        index,
        recorded: format!("{recorded:?}"),
        replayed: format!("{replayed:?}"),
    };
    for (index, op) in trace.iter().enumerate() {
        match op {
            TraceOp::First {
                connection_id,
                header,
                len,
                at,
                outcome,
            } => {
                let mut payload = header[..(*len).min(REQUEST_HEADER_BYTES)].to_vec();
                payload.resize(*len, 0);
                let got = pool.offer_first_fragment(&Fragment::first(*connection_id, payload), *at);
                if &got != outcome {
                    return Err(diverge(index, outcome, &got));
                }
            }
            TraceOp::Continuation {
                connection_id,
                len,
                at,
                outcome,
            } => {
                let got = pool.offer_continuation(&Fragment::continuation(*connection_id, vec![0; *len]), *at);
                if &got != outcome {
                    return Err(diverge(index, outcome, &got));
                }
            }
            TraceOp::Collect { connection_id, freed } => {
                let got = pool.garbage_collect(*connection_id);
                if got != *freed {
                    return Err(diverge(index, freed, &got));
                }
            }
            TraceOp::Dispatch { offered } => {
                let mut decisions = offered.iter().map(|o| o.1);
                let mut got = Vec::new();
                pool.dispatch_complete(|r| {
                    let place = decisions.next().unwrap_or(false);
                    got.push((r.connection_id, place));
                    if place {
                        Ok(())
                    } else {
                        Err(r)
                    }
                });
                if &got != offered {
                    return Err(diverge(index, offered, &got));
                }
            }
        }
    }
    Ok(trace.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accelerators::AcceleratorSpec;
    use crate::policies::BufferInputPolicyKind;
    use crate::workload::{Delay, SizeDistribution};

    fn config(clients: usize, fragments: u32, ingest: IngestMode) -> SimConfig {
        SimConfig {
            workload: WorkloadConfig {
                clients,
                request_mix: vec![(0, 1.0)],
                size_distribution: SizeDistribution::fixed(fragments),
                requests_per_client: 20,
                inter_fragment_delay: Delay::uniform(30.0, 40.0),
                ..WorkloadConfig::default()
            },
            pool: PoolConfig::uniform(4, 256 * 1024, BufferInputPolicyKind::EligibleRr),
            accelerators: vec![AcceleratorSpec::modeled(0, 20.0, 1)],
            selector: SelectorPolicyKind::Rr,
            ingest,
            horizon_us: None,
        }
    }

    #[test]
    fn single_client_completes_every_request() {
        let res = run(&config(1, 2, IngestMode::Reassembled), 1).unwrap();
        assert_eq!(res.records.len(), 20);
        for r in &res.records {
            assert!(r.completed());
            assert_eq!(r.drops, 0);
            assert_eq!(r.service_time, Nanos::from_micros(40));
            assert_eq!(r.occupancy(), Some(r.service_time));
            assert_eq!(r.queue_wait(), Some(Nanos::ZERO));
            let lat = r.latency.unwrap();
            let gap = r.last_sent_at.unwrap() - r.first_sent_at;
            assert!((Nanos::from_micros(30)..=Nanos::from_micros(40)).contains(&gap));
            assert_eq!(lat, gap + Nanos::from_micros(40));
        }
    }

    #[test]
    fn immediate_mode_holds_slot_across_gaps() {
        let res = run(&config(1, 4, IngestMode::Immediate), 1).unwrap();
        for r in &res.records {
            let occ = r.occupancy().unwrap();
            assert_eq!(r.service_time, Nanos::from_micros(80));
            assert_eq!(occ, r.last_sent_at.unwrap() - r.first_sent_at + Nanos::from_micros(20));
        }
    }

    #[test]
    fn slots_never_overlap_and_busy_time_is_conserved() {
        let mut cfg = config(6, 2, IngestMode::Reassembled);
        cfg.workload.size_distribution = SizeDistribution::EvenMix;
        cfg.accelerators = vec![AcceleratorSpec::modeled(0, 10.0, 2)];
        cfg.pool = PoolConfig::uniform(3, 64 * 1024, BufferInputPolicyKind::EligibleRr);
        let res = run(&cfg, 5).unwrap();
        for s in 0..2 {
            let mut iv: Vec<_> = res
                .records
                .iter()
                .filter(|r| r.slot == Some(s))
                .map(|r| (r.service_start.unwrap(), r.service_end.unwrap(), r.service_time))
                .collect();
            iv.sort();
            for w in iv.windows(2) {
                assert!(w[0].1 <= w[1].0, "overlap on slot {s}");
            }
            assert!(iv.iter().all(|(a, b, t)| *b - *a == *t));
            let busy: u64 = iv.iter().map(|x| x.2 .0).sum();
            assert_eq!(Nanos(busy), res.slot_busy[s]);
        }
        assert!(res.records.iter().all(RequestRecord::completed));
        assert!(res.records.iter().map(|r| r.drops).sum::<u32>() > 0);
        assert_eq!(res.pool.offered_bytes, res.pool.delivered_bytes + res.pool.dropped_bytes);
    }

    #[test]
    fn closed_loop_keeps_one_request_in_flight() {
        let mut cfg = config(4, 2, IngestMode::Reassembled);
        cfg.workload.size_distribution = SizeDistribution::LargeDominant;
        let res = run(&cfg, 3).unwrap();
        for c in 0..4 {
            let mine: Vec<_> = res.records.iter().filter(|r| r.client == c).collect();
            assert_eq!(mine.len(), 20);
            for w in mine.windows(2) {
                assert!(w[0].service_end.unwrap() <= w[1].first_sent_at);
            }
        }
    }

    #[test]
    fn same_seed_same_result() {
        let mut cfg = config(8, 2, IngestMode::Reassembled);
        cfg.workload.size_distribution = SizeDistribution::LargeDominant;
        assert_eq!(run(&cfg, 11).unwrap(), run(&cfg, 11).unwrap());
        assert_ne!(run(&cfg, 11).unwrap().records, run(&cfg, 12).unwrap().records);
    }

    #[test]
    fn horizon_bounds_streaming_runs() {
        let mut cfg = config(2, 1, IngestMode::Reassembled);
        cfg.workload.arrival = ArrivalMode::Streaming;
        cfg.workload.requests_per_client = 1_000_000;
        cfg.horizon_us = Some(1000.0);
        let res = run(&cfg, 0).unwrap();
        assert_eq!(res.makespan, Nanos::from_micros(1000));
        assert!(res.records.iter().filter(|r| r.attempts > 0).all(|r| r.first_sent_at <= res.makespan));
        // at most one scheduled-but-unsent request per client
        assert!(res.records.iter().filter(|r| r.attempts == 0).count() <= 2);
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(1, 1, IngestMode::Reassembled);
        cfg.workload.request_mix = vec![(9, 1.0)];
        assert_eq!(cfg.validate(), Err(SimError::UnknownAccelerator(9)));
        let mut cfg = config(1, 1, IngestMode::Reassembled);
        cfg.accelerators[0].kind = AcceleratorKind::Echo;
        assert_eq!(cfg.validate(), Err(SimError::NotModeled(0)));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = config(3, 2, IngestMode::Immediate);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<SimConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn replay_detects_divergence() {
        let pc = PoolConfig::uniform(1, 4096, BufferInputPolicyKind::EligibleRr);
        let mut pool = ReassemblyPool::new(&pc);
        pool.record_trace();
        let wire = {
            let h = RequestHeader::new(0, 4, [0; 60]);
            let mut w = h.encode().to_vec();
            w.resize(256, 0);
            w
        };
        let f = crate::protocol::fragment_request(1, &wire, 128);
        pool.offer_first_fragment(&f[0], Nanos(0)).unwrap();
        let g = crate::protocol::fragment_request(2, &wire, 128);
        pool.offer_first_fragment(&g[0], Nanos(1)).unwrap();
        pool.offer_continuation(&f[1], Nanos(2)).unwrap();
        pool.dispatch_complete(Err);
        pool.drain_complete();
        pool.garbage_collect(2);
        let trace = pool.take_trace();
        assert_eq!(replay_pool_trace(&pc, &trace), Ok(trace.len()));
        let other = PoolConfig::uniform(2, 4096, BufferInputPolicyKind::EligibleRr);
        assert_eq!(replay_pool_trace(&other, &trace).unwrap_err().index, 1);
    }
}
