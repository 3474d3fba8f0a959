//! Client workload model: request-type mixes, fragment-count distributions,
//! inter-fragment and retry delays, and the per-client request lifecycle.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{substream, Nanos, Stream};
use crate::protocol::{RequestHeader, BLOCK_BYTES, PARAMETER_BYTES};

pub const DEFAULT_FRAGMENT_BYTES: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("delay range {lo}..{hi} is empty or negative")]
    BadRange { lo: f64, hi: f64 },
    #[error("fragment size {0} is not a positive multiple of 64 bytes")]
    BadFragmentSize(u64),
    #[error("requests of {0} fragments do not fit in a header size field")]
    TooLarge(u32),
    #[error("workload needs at least one client")]
    NoClients,
}

/// Weighted categories over fragment counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDistribution {
    /// 95% single-fragment, 3% two, 1% four, 1% eight.
    SmallDominant,
    /// 25% each of 1, 2, 4 and 8 fragments.
    EvenMix,
    /// 10% single-fragment, 30% each of 2, 4 and 8.
    LargeDominant,
    /// `(fragments, weight)` pairs.
    Custom(Vec<(u32, f64)>),
}

impl SizeDistribution {
    pub fn weights(&self) -> Vec<(u32, f64)> {
        match self {
            SizeDistribution::SmallDominant => vec![(1, 0.95), (2, 0.03), (4, 0.01), (8, 0.01)],
            SizeDistribution::EvenMix => vec![(1, 0.25), (2, 0.25), (4, 0.25), (8, 0.25)],
            SizeDistribution::LargeDominant => vec![(1, 0.10), (2, 0.30), (4, 0.30), (8, 0.30)],
            SizeDistribution::Custom(w) => w.clone(),
        }
    }

    pub fn fixed(fragments: u32) -> Self {
        SizeDistribution::Custom(vec![(fragments, 1.0)])
    }

    pub fn label(&self) -> String {
        match self {
            SizeDistribution::SmallDominant => "small".into(),
            SizeDistribution::EvenMix => "even".into(),
            SizeDistribution::LargeDominant => "large".into(),
            SizeDistribution::Custom(w) => w
                .iter()
                .map(|(f, p)| format!("{f}x{p}"))
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

/// Categorical sampler over arbitrary values.
#[derive(Debug, Clone)]
pub struct Categorical<T> {
    values: Vec<T>,
    index: WeightedIndex<f64>,
}

impl<T: Copy> Categorical<T> {
    pub fn new(pairs: &[(T, f64)]) -> Result<Self, WorkloadError> {
        let index = WeightedIndex::new(pairs.iter().map(|p| p.1)).map_err(|_| WorkloadError::BadWeights)?;
        Ok(Self {
            values: pairs.iter().map(|p| p.0).collect(),
            index,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        self.values[self.index.sample(rng)]
    }
}

/// A random delay, specified in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Delay {
    Uniform { lo_us: f64, hi_us: f64 },
    Exponential { mean_us: f64 },
    Fixed { us: f64 },
}

impl Delay {
    pub fn uniform(lo_us: f64, hi_us: f64) -> Self {
        Delay::Uniform { lo_us, hi_us }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let (lo, hi) = match *self {
            Delay::Uniform { lo_us, hi_us } => (lo_us, hi_us),
            Delay::Exponential { mean_us } => (mean_us, mean_us),
            Delay::Fixed { us } => (us, us),
        };
        if lo < 0.0 || hi < lo || !hi.is_finite() {
            return Err(WorkloadError::BadRange { lo, hi });
        }
        if matches!(self, Delay::Exponential { .. }) && lo <= 0.0 {
            return Err(WorkloadError::BadRange { lo, hi });
        }
        Ok(())
    }

    pub fn mean_us(&self) -> f64 {
        match *self {
            Delay::Uniform { lo_us, hi_us } => (lo_us + hi_us) / 2.0,
            Delay::Exponential { mean_us } => mean_us,
            Delay::Fixed { us } => us,
        }
    }

    /// Uniform delays are drawn on the integer nanosecond grid, inclusive.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Nanos {
        match *self {
            Delay::Uniform { lo_us, hi_us } => {
                let (lo, hi) = (Nanos::from_micros_f64(lo_us).0, Nanos::from_micros_f64(hi_us).0);
                Nanos(rng.random_range(lo..=hi))
            }
            Delay::Exponential { mean_us } => {
                let exp = Exp::new(1.0 / mean_us).expect("validated rate");
                Nanos::from_micros_f64(exp.sample(rng))
            }
            Delay::Fixed { us } => Nanos::from_micros_f64(us),
        }
    }
}

/// How clients pace their requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// One request in flight; the next starts when the response arrives,
    /// and dropped requests are retried after the retry delay.
    #[default]
    ClosedLoop,
    /// Back-to-back requests with an inter-fragment gap before every
    /// fragment, first included; no waiting for responses and no retries.
    Streaming,
}

/// Where end-to-end latency starts counting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyStart {
    #[default]
    FirstFragment,
    LastFragment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub clients: usize,
    /// `(accelerator_id, weight)` pairs.
    pub request_mix: Vec<(u16, f64)>,
    pub size_distribution: SizeDistribution,
    pub requests_per_client: u64,
    pub inter_fragment_delay: Delay,
    pub retry_delay: Delay,
    pub fragment_bytes: u64,
    #[serde(default)]
    pub arrival: ArrivalMode,
    #[serde(default)]
    pub latency_start: LatencyStart,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            request_mix: vec![(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)],
            size_distribution: SizeDistribution::EvenMix,
            requests_per_client: 100,
            inter_fragment_delay: Delay::uniform(5.0, 15.0),
            retry_delay: Delay::uniform(80.0, 120.0),
            fragment_bytes: DEFAULT_FRAGMENT_BYTES,
            arrival: ArrivalMode::ClosedLoop,
            latency_start: LatencyStart::FirstFragment,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.clients == 0 {
            return Err(WorkloadError::NoClients);
        }
        if self.fragment_bytes == 0 || !self.fragment_bytes.is_multiple_of(BLOCK_BYTES as u64) {
            return Err(WorkloadError::BadFragmentSize(self.fragment_bytes));
        }
        Categorical::new(&self.request_mix)?;
        let sizes = self.size_distribution.weights();
        Categorical::new(&sizes)?;
        for &(f, _) in &sizes {
            if f == 0 || (f as u64 * self.fragment_bytes) / BLOCK_BYTES as u64 > u16::MAX as u64 {
                return Err(WorkloadError::TooLarge(f));
            }
        }
        self.inter_fragment_delay.validate()?;
        self.retry_delay.validate()
    }

    /// Header for a request of `fragments` full fragments.
    pub fn header(&self, accelerator_id: u16, fragments: u32) -> RequestHeader {
        let blocks = fragments as u64 * self.fragment_bytes / BLOCK_BYTES as u64;
        RequestHeader::new(accelerator_id, blocks as u16, [0; PARAMETER_BYTES])
    }
}

/// A request drawn for one client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestPlan {
    pub header: RequestHeader,
    pub fragments: u32,
}

/// Per-client state driven by the simulator's event loop.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: u32,
    remaining: u64,
    in_flight: Option<InFlight>,
    latencies: Vec<Nanos>,
    mix: Categorical<u16>,
    sizes: Categorical<u32>,
    mix_rng: ChaCha8Rng,
    size_rng: ChaCha8Rng,
    gap_rng: ChaCha8Rng,
    retry_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InFlight {
    pub plan: RequestPlan,
    /// First-fragment send time of the first attempt.
    pub first_sent_at: Nanos,
    pub last_sent_at: Option<Nanos>,
    pub attempts: u32,
}

/// What a client does after hearing back about its request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientAction {
    Retry { after: Nanos },
    Next,
    Finished,
}

/// Outcome reported to a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Dropped,
}

impl Client {
    pub fn new(id: u32, config: &WorkloadConfig, seed: u64) -> Result<Self, WorkloadError> {
        config.validate()?;
        let actor = u64::from(id);
        Ok(Self {
            id,
            remaining: config.requests_per_client,
            in_flight: None,
            latencies: Vec::new(),
            mix: Categorical::new(&config.request_mix)?,
            sizes: Categorical::new(&config.size_distribution.weights())?,
            mix_rng: substream(seed, Stream::MixDraw, actor),
            size_rng: substream(seed, Stream::SizeDraw, actor),
            gap_rng: substream(seed, Stream::InterFragment, actor),
            retry_rng: substream(seed, Stream::Retry, actor),
        })
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    pub fn in_flight(&self) -> Option<&InFlight> {
        self.in_flight.as_ref()
    }

    pub fn latencies(&self) -> &[Nanos] {
        &self.latencies
    }

    /// Draws the next request and marks it in flight.
    pub fn next_request(&mut self, config: &WorkloadConfig, now: Nanos) -> RequestPlan {
        assert!(self.remaining > 0, "client {} has no requests left", self.id);
        assert!(self.in_flight.is_none(), "client {} already has a request in flight", self.id);
        let accel = self.mix.sample(&mut self.mix_rng);
        let fragments = self.sizes.sample(&mut self.size_rng);
        let plan = RequestPlan {
            header: config.header(accel, fragments),
            fragments,
        };
        self.in_flight = Some(InFlight {
            plan,
            first_sent_at: now,
            last_sent_at: None,
            attempts: 1,
        });
        plan
    }

    pub fn fragment_gap(&mut self, config: &WorkloadConfig) -> Nanos {
        config.inter_fragment_delay.sample(&mut self.gap_rng)
    }

    /// Records the first-fragment send time of the first attempt.
    pub fn mark_first_sent(&mut self, now: Nanos) {
        let f = self.in_flight.as_mut().expect("request in flight");
        if f.attempts == 1 && f.last_sent_at.is_none() {
            f.first_sent_at = now;
        }
    }

    pub fn mark_last_sent(&mut self, now: Nanos) {
        self.in_flight.as_mut().expect("request in flight").last_sent_at = Some(now);
    }

    /// Handles the response to the in-flight request.
    pub fn on_response(&mut self, config: &WorkloadConfig, outcome: Outcome, now: Nanos) -> ClientAction {
        let flight = self.in_flight.as_mut().expect("response without a request in flight");
        match (outcome, config.arrival) {
            (Outcome::Dropped, ArrivalMode::ClosedLoop) => {
                flight.attempts += 1;
                flight.last_sent_at = None;
                ClientAction::Retry {
                    after: config.retry_delay.sample(&mut self.retry_rng),
                }
            }
            (outcome, _) => {
                if outcome == Outcome::Ok {
                    let start = match config.latency_start {
                        LatencyStart::FirstFragment => flight.first_sent_at,
                        LatencyStart::LastFragment => flight.last_sent_at.unwrap_or(flight.first_sent_at),
                    };
                    self.latencies.push(now - start);
                }
                self.in_flight = None;
                self.remaining -= 1;
                if self.remaining == 0 {
                    ClientAction::Finished
                } else {
                    ClientAction::Next
                }
            }
        }
    }

    /// Streaming clients let go of a request once its last fragment is out.
    pub fn release(&mut self) -> Option<InFlight> {
        let f = self.in_flight.take()?;
        self.remaining -= 1;
        Some(f)
    }
}
