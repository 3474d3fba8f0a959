//! Named experiment scenarios, metric extraction and CSV/manifest output.
//!
//! A scenario is a list of configuration points; running it over a list of
//! seeds yields one CSV row per `(point, seed, class)`. Classes are
//! `frags:N` (requests of N fragments), `accel:ID` (requests for one
//! accelerator type) and `all`. The manifest written next to the CSV holds
//! the full configuration and reproduces the CSV byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accelerators::AcceleratorSpec;
use crate::engine::Nanos;
use crate::policies::{BufferInputPolicyKind, SelectorPolicyKind};
use crate::reassembly::PoolConfig;
use crate::sim::{run, IngestMode, RequestRecord, SimConfig, SimError, SimResult};
use crate::workload::{ArrivalMode, Delay, SizeDistribution, WorkloadConfig};

pub const ACCEL_A: u16 = 0;
pub const ACCEL_B: u16 = 1;
pub const ACCEL_C: u16 = 2;

/// Reassembly buffer capacity used by every scenario.
pub const SCENARIO_BUFFER_BYTES: u64 = 64 * 1024;
/// Accelerator queue capacity used by every scenario; large enough that
/// closed-loop scenarios are never limited by it.
pub const SCENARIO_QUEUE_BYTES: u64 = 256 * 1024;
pub const SINGLE_FRAGMENT_QUEUE_BYTES: u64 = 1024 * 1024;

pub const SCENARIOS: &[&str] = &[
    "reassembly_utilization",
    "buffer_decoupling",
    "single_fragment",
    "input_policy",
    "input_policy_large",
    "isolation",
    "isolation_large",
    "selector_policy",
    "selector_policy_large",
    "gd1_crosscheck",
];

pub const DEFAULT_SEEDS: std::ops::Range<u64> = 0..10;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("point {point}: {source}")]
    Sim { point: String, source: SimError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    ManifestParse(#[from] toml::de::Error),
    #[error("manifest: {0}")]
    ManifestWrite(#[from] toml::ser::Error),
    #[error("no seeds given")]
    NoSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPoint {
    pub label: String,
    pub config: SimConfig,
}

/// A scenario with its seeds: everything needed to reproduce a CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub points: Vec<ScenarioPoint>,
}

fn even_mix() -> Vec<(u16, f64)> {
    mix(1.0 / 3.0)
}

/// Accelerator A takes `share`, B and C split the rest evenly.
fn mix(share: f64) -> Vec<(u16, f64)> {
    let rest = (1.0 - share) / 2.0;
    vec![(ACCEL_A, share), (ACCEL_B, rest), (ACCEL_C, rest)]
}

fn accels(times_us: [f64; 3], instances: [usize; 3]) -> Vec<AcceleratorSpec> {
    [ACCEL_A, ACCEL_B, ACCEL_C]
        .into_iter()
        .zip(times_us.into_iter().zip(instances))
        .map(|(id, (t, n))| AcceleratorSpec {
            queue_capacity_bytes: SCENARIO_QUEUE_BYTES,
            ..AcceleratorSpec::modeled(id, t, n)
        })
        .collect()
}

const DISTRIBUTIONS: [SizeDistribution; 3] = [
    SizeDistribution::SmallDominant,
    SizeDistribution::EvenMix,
    SizeDistribution::LargeDominant,
];

fn closed_loop(clients: usize, request_mix: Vec<(u16, f64)>, size_distribution: SizeDistribution) -> WorkloadConfig {
    WorkloadConfig {
        clients,
        request_mix,
        size_distribution,
        ..WorkloadConfig::default()
    }
}

fn pool(buffers: usize, input_policy: BufferInputPolicyKind) -> PoolConfig {
    PoolConfig::uniform(buffers, SCENARIO_BUFFER_BYTES, input_policy)
}

fn point(label: String, workload: WorkloadConfig, pool: PoolConfig, accelerators: Vec<AcceleratorSpec>, selector: SelectorPolicyKind) -> ScenarioPoint {
    ScenarioPoint {
        label,
        config: SimConfig {
            workload,
            pool,
            accelerators,
            selector,
            ingest: IngestMode::Reassembled,
            horizon_us: None,
        },
    }
}

/// Virtual run time of the streaming utilization scenario.
pub const UTILIZATION_HORIZON_US: f64 = 1_000_000.0;
pub const GD1_REQUESTS: u64 = 200_000;
/// Effectively unbounded; streaming utilization runs stop at the horizon.
pub const STREAMING_REQUESTS: u64 = 1_000_000_000;
pub const GD1_RHOS: [f64; 3] = [0.3, 0.5, 0.7];

fn reassembly_utilization() -> Vec<ScenarioPoint> {
    let mut points = Vec::new();
    for mode in [IngestMode::Immediate, IngestMode::Reassembled] {
        for frags in [1u32, 2, 4, 8] {
            let workload = WorkloadConfig {
                clients: 2,
                request_mix: vec![(ACCEL_A, 1.0)],
                size_distribution: SizeDistribution::fixed(frags),
                requests_per_client: STREAMING_REQUESTS,
                inter_fragment_delay: Delay::uniform(30.0, 40.0),
                arrival: ArrivalMode::Streaming,
                ..WorkloadConfig::default()
            };
            let mut p = point(
                format!("mode={};frags={frags}", mode_name(mode)),
                workload,
                pool(4, BufferInputPolicyKind::EligibleRr),
                vec![AcceleratorSpec {
                    queue_capacity_bytes: SCENARIO_QUEUE_BYTES,
                    ..AcceleratorSpec::modeled(ACCEL_A, 20.0, 1)
                }],
                SelectorPolicyKind::Rr,
            );
            p.config.ingest = mode;
            p.config.horizon_us = Some(UTILIZATION_HORIZON_US);
            points.push(p);
        }
    }
    points
}

fn mode_name(mode: IngestMode) -> &'static str {
    match mode {
        IngestMode::Immediate => "immediate",
        IngestMode::Reassembled => "reassembled",
    }
}

fn buffer_decoupling() -> Vec<ScenarioPoint> {
    let mut points = Vec::new();
    for dist in DISTRIBUTIONS {
        for decoupled in [false, true] {
            let mut p = pool(3, BufferInputPolicyKind::EligibleRr);
            if !decoupled {
                p.bindings = Some(vec![ACCEL_A, ACCEL_B, ACCEL_C]);
            }
            points.push(point(
                format!("dist={};buffers={}", dist.label(), if decoupled { "decoupled" } else { "per_accelerator" }),
                closed_loop(8, even_mix(), dist.clone()),
                p,
                accels([10.0, 10.0, 10.0], [1, 1, 1]),
                SelectorPolicyKind::Rr,
            ));
        }
    }
    points
}

fn single_fragment() -> Vec<ScenarioPoint> {
    let mut points = Vec::new();
    for dist in DISTRIBUTIONS {
        for with in [false, true] {
            let mut p = pool(4, BufferInputPolicyKind::EligibleRr);
            p.single_fragment_bytes = with.then_some(SINGLE_FRAGMENT_QUEUE_BYTES);
            points.push(point(
                format!("dist={};single_queue={}", dist.label(), if with { "on" } else { "off" }),
                closed_loop(8, even_mix(), dist.clone()),
                p,
                accels([10.0, 10.0, 10.0], [1, 1, 1]),
                SelectorPolicyKind::Rr,
            ));
        }
    }
    points
}

fn input_policy(times: [f64; 3]) -> Vec<ScenarioPoint> {
    let mut points = Vec::new();
    for policy in [BufferInputPolicyKind::NaiveRr, BufferInputPolicyKind::EligibleRr, BufferInputPolicyKind::Jsb] {
        for clients in 4..=8 {
            points.push(point(
                format!("policy={};clients={clients}", policy.name()),
                closed_loop(clients, even_mix(), SizeDistribution::LargeDominant),
                pool(4, policy),
                accels(times, [4, 4, 4]),
                SelectorPolicyKind::Rr,
            ));
        }
    }
    points
}

pub const ISOLATION_SHARES: [f64; 5] = [1.0 / 3.0, 0.5, 0.75, 0.9, 0.95];

fn isolation(times: [f64; 3]) -> Vec<ScenarioPoint> {
    ISOLATION_SHARES
        .iter()
        .map(|&share| {
            point(
                format!("share_a={:.3}", share),
                closed_loop(4, mix(share), SizeDistribution::SmallDominant),
                pool(4, BufferInputPolicyKind::EligibleRr),
                accels(times, [2, 2, 2]),
                SelectorPolicyKind::Rr,
            )
        })
        .collect()
}

fn selector_policy(times: [f64; 3]) -> Vec<ScenarioPoint> {
    let mut points = Vec::new();
    for dist in DISTRIBUTIONS {
        for selector in [SelectorPolicyKind::Rr, SelectorPolicyKind::Jsq] {
            points.push(point(
                format!("dist={};selector={}", dist.label(), selector.name()),
                closed_loop(8, mix(0.95), dist.clone()),
                pool(8, BufferInputPolicyKind::EligibleRr),
                accels(times, [3, 1, 1]),
                selector,
            ));
        }
    }
    points
}

/// One streaming client sending two 64-byte fragments per request with
/// exponential gaps before each, into a single accelerator with 1 µs of
/// service per request. Request inter-arrivals are then Erlang-2 and the
/// queue wait should follow the G/D/1 model at the same load.
pub fn gd1_point(rho: f64) -> ScenarioPoint {
    let workload = WorkloadConfig {
        clients: 1,
        request_mix: vec![(ACCEL_A, 1.0)],
        size_distribution: SizeDistribution::fixed(2),
        requests_per_client: GD1_REQUESTS,
        inter_fragment_delay: Delay::Exponential { mean_us: 1.0 / (2.0 * rho) },
        fragment_bytes: 64,
        arrival: ArrivalMode::Streaming,
        ..WorkloadConfig::default()
    };
    point(
        format!("rho={rho:.2}"),
        workload,
        pool(1, BufferInputPolicyKind::EligibleRr),
        vec![AcceleratorSpec {
            queue_capacity_bytes: 1 << 40,
            ..AcceleratorSpec::modeled(ACCEL_A, 0.5, 1)
        }],
        SelectorPolicyKind::Rr,
    )
}

pub fn build_scenario(name: &str) -> Result<Vec<ScenarioPoint>, ExperimentError> {
    const SHORT: [f64; 3] = [10.0, 5.0, 1.0];
    const LONG: [f64; 3] = [1000.0, 10.0, 1.0];
    Ok(match name {
        "reassembly_utilization" => reassembly_utilization(),
        "buffer_decoupling" => buffer_decoupling(),
        "single_fragment" => single_fragment(),
        "input_policy" => input_policy(SHORT),
        "input_policy_large" => input_policy(LONG),
        "isolation" => isolation(SHORT),
        "isolation_large" => isolation(LONG),
        "selector_policy" => selector_policy(SHORT),
        "selector_policy_large" => selector_policy(LONG),
        "gd1_crosscheck" => GD1_RHOS.iter().map(|&r| gd1_point(r)).collect(),
        other => return Err(ExperimentError::UnknownScenario(other.to_string())),
    })
}

pub fn manifest(name: &str, seeds: &[u64]) -> Result<Manifest, ExperimentError> {
    Ok(Manifest {
        scenario: name.to_string(),
        seeds: seeds.to_vec(),
        points: build_scenario(name)?,
    })
}

/// One simulation of one point.
#[derive(Debug, Clone)]
pub struct PointRun {
    pub point: usize,
    pub label: String,
    pub seed: u64,
    pub result: SimResult,
}

/// Runs every `(point, seed)` pair, in parallel, returning runs ordered by
/// point then seed.
pub fn run_manifest(m: &Manifest) -> Result<Vec<PointRun>, ExperimentError> {
    if m.seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let jobs: Vec<(usize, u64)> = (0..m.points.len())
        .flat_map(|p| m.seeds.iter().map(move |&s| (p, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(p, seed)| {
            let point = &m.points[p];
            let result = run(&point.config, seed).map_err(|source| ExperimentError::Sim {
                point: point.label.clone(),
                source,
            })?;
            Ok(PointRun {
                point: p,
                label: point.label.clone(),
                seed,
                result,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Fragments(u32),
    Accelerator(u16),
    All,
}

impl Class {
    pub fn matches(&self, r: &RequestRecord) -> bool {
        match *self {
            Class::Fragments(n) => r.fragments == n,
            Class::Accelerator(a) => r.accelerator_id == a,
            Class::All => true,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Class::Fragments(n) => format!("frags:{n}"),
            Class::Accelerator(a) => format!("accel:{a}"),
            Class::All => "all".into(),
        }
    }

    /// The classes reported for a configuration, in output order.
    pub fn for_config(cfg: &SimConfig) -> Vec<Class> {
        let mut frags: Vec<u32> = cfg.workload.size_distribution.weights().iter().map(|w| w.0).collect();
        frags.sort_unstable();
        frags.dedup();
        let mut ids: Vec<u16> = cfg.workload.request_mix.iter().map(|m| m.0).collect();
        ids.sort_unstable();
        ids.dedup();
        frags
            .into_iter()
            .map(Class::Fragments)
            .chain(ids.into_iter().map(Class::Accelerator))
            .chain([Class::All])
            .collect()
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

pub fn sorted_micros(values: impl IntoIterator<Item = Nanos>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().map(Nanos::as_micros_f64).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Records that actually entered the system (at least one attempt sent).
pub fn offered_records<'a>(res: &'a SimResult, class: Class) -> impl Iterator<Item = &'a RequestRecord> + 'a {
    res.records.iter().filter(move |r| r.attempts > 0 && class.matches(r))
}

pub fn latency_samples(res: &SimResult, class: Class) -> Vec<f64> {
    sorted_micros(offered_records(res, class).filter_map(|r| r.latency))
}

pub fn wait_samples(res: &SimResult, class: Class) -> Vec<f64> {
    sorted_micros(offered_records(res, class).filter(|r| r.completed()).filter_map(RequestRecord::queue_wait))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub offered: u64,
    pub dropped: u64,
    pub drop_rate: f64,
    pub completed: u64,
    pub latency_p25: Option<f64>,
    pub latency_p50: Option<f64>,
    pub latency_p75: Option<f64>,
    pub wait_mean: Option<f64>,
    pub wait_min: Option<f64>,
    pub wait_p25: Option<f64>,
    pub wait_p50: Option<f64>,
    pub wait_p75: Option<f64>,
    pub wait_max: Option<f64>,
    /// Service time over slot occupancy of completed requests.
    pub busy_fraction: Option<f64>,
    /// Service time of completed requests over slot time available.
    pub utilization: f64,
    pub throughput_rps: f64,
}

pub fn metrics(res: &SimResult, class: Class) -> MetricReport {
    let recs: Vec<&RequestRecord> = offered_records(res, class).collect();
    let offered: u64 = recs.iter().map(|r| u64::from(r.attempts)).sum();
    let dropped: u64 = recs.iter().map(|r| u64::from(r.drops)).sum();
    let done: Vec<&&RequestRecord> = recs.iter().filter(|r| r.completed()).collect();
    let lat = sorted_micros(done.iter().filter_map(|r| r.latency));
    let wait = sorted_micros(done.iter().filter_map(|r| r.queue_wait()));
    let service: u64 = done.iter().map(|r| r.service_time.0).sum();
    let occupancy: u64 = done.iter().filter_map(|r| r.occupancy()).map(|n| n.0).sum();
    let slots = match class {
        Class::Accelerator(a) => res.slot_types.iter().filter(|&&t| t == a).count(),
        _ => res.slot_types.len(),
    };
    let span = res.makespan.0.max(1) as f64;
    MetricReport {
        offered,
        dropped,
        drop_rate: if offered == 0 { 0.0 } else { dropped as f64 / offered as f64 },
        completed: done.len() as u64,
        latency_p25: percentile(&lat, 0.25),
        latency_p50: percentile(&lat, 0.5),
        latency_p75: percentile(&lat, 0.75),
        wait_mean: (!wait.is_empty()).then(|| wait.iter().sum::<f64>() / wait.len() as f64),
        wait_min: wait.first().copied(),
        wait_p25: percentile(&wait, 0.25),
        wait_p50: percentile(&wait, 0.5),
        wait_p75: percentile(&wait, 0.75),
        wait_max: wait.last().copied(),
        busy_fraction: (occupancy > 0).then(|| service as f64 / occupancy as f64),
        utilization: service as f64 / (slots.max(1) as f64 * span),
        throughput_rps: done.len() as f64 / (span / 1e9),
    }
}

pub const CSV_HEADER: [&str; 20] = [
    "scenario",
    "point",
    "seed",
    "class",
    "offered",
    "dropped",
    "drop_rate",
    "completed",
    "lat_p25_us",
    "lat_p50_us",
    "lat_p75_us",
    "wait_mean_us",
    "wait_min_us",
    "wait_p25_us",
    "wait_p50_us",
    "wait_p75_us",
    "wait_max_us",
    "busy_fraction",
    "utilization",
    "throughput_rps",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

/// Writes one row per `(point, seed, class)`.
pub fn write_csv<W: Write>(out: W, m: &Manifest, runs: &[PointRun]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for run in runs {
        let cfg = &m.points[run.point].config;
        for class in Class::for_config(cfg) {
            let r = metrics(&run.result, class);
            w.write_record([
                m.scenario.clone(),
                run.label.clone(),
                run.seed.to_string(),
                class.label(),
                r.offered.to_string(),
                r.dropped.to_string(),
                format!("{:.6}", r.drop_rate),
                r.completed.to_string(),
                fmt_opt(r.latency_p25),
                fmt_opt(r.latency_p50),
                fmt_opt(r.latency_p75),
                fmt_opt(r.wait_mean),
                fmt_opt(r.wait_min),
                fmt_opt(r.wait_p25),
                fmt_opt(r.wait_p50),
                fmt_opt(r.wait_p75),
                fmt_opt(r.wait_max),
                r.busy_fraction.map(|x| format!("{x:.6}")).unwrap_or_default(),
                format!("{:.6}", r.utilization),
                format!("{:.3}", r.throughput_rps),
            ])?;
        }
    }
    w.flush().map_err(|e| ExperimentError::Io {
        path: PathBuf::from("<csv>"),
        source: e,
    })
}

pub fn csv_bytes(m: &Manifest) -> Result<Vec<u8>, ExperimentError> {
    let runs = run_manifest(m)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, m, &runs)?;
    Ok(buf)
}

pub fn manifest_to_toml(m: &Manifest) -> Result<String, ExperimentError> {
    Ok(toml::to_string(m)?)
}

pub fn manifest_from_toml(text: &str) -> Result<Manifest, ExperimentError> {
    Ok(toml::from_str(text)?)
}

/// Runs a manifest and writes `<scenario>.csv` and `<scenario>.manifest.toml`
/// into `dir`. Returns the CSV path.
pub fn run_experiment(m: &Manifest, dir: &Path) -> Result<PathBuf, ExperimentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join(format!("{}.csv", m.scenario));
    let manifest_path = dir.join(format!("{}.manifest.toml", m.scenario));
    let bytes = csv_bytes(m)?;
    fs::write(&manifest_path, manifest_to_toml(m)?).map_err(io(&manifest_path))?;
    fs::write(&csv_path, bytes).map_err(io(&csv_path))?;
    Ok(csv_path)
}
