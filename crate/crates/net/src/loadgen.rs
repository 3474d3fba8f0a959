//! Closed-loop load generator: each client sends its next request as soon as
//! the previous one is answered, retrying drops after a short random delay.

use std::io::Write;
use std::net::SocketAddr;
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use offrac_core::protocol::{Status, PARAMETER_BYTES};
use rand::Rng;
use serde::Serialize;

use crate::client::{encode_request, payload_for_fragments, Client, ClientError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    /// Requests per client, counting only successful ones.
    Requests(u64),
    Duration(Duration),
}

#[derive(Debug, Clone)]
pub struct LoadgenConfig {
    pub addr: SocketAddr,
    pub clients: usize,
    pub accelerator_id: u16,
    pub parameters: [u8; PARAMETER_BYTES],
    /// Each request spans exactly this many fragments.
    pub fragments: u32,
    pub fragment_bytes: usize,
    pub stop: Stop,
    /// Requests sent before this much time has elapsed are not reported.
    pub warmup: Duration,
    pub retry_delay: (Duration, Duration),
}

impl LoadgenConfig {
    pub fn new(addr: SocketAddr, clients: usize, accelerator_id: u16, stop: Stop) -> Self {
        Self {
            addr,
            clients,
            accelerator_id,
            parameters: [0; PARAMETER_BYTES],
            fragments: 1,
            fragment_bytes: 4096,
            stop,
            warmup: Duration::ZERO,
            retry_delay: (Duration::from_micros(80), Duration::from_micros(120)),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        payload_for_fragments(self.fragments, self.fragment_bytes)
    }
}

/// One request attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestRow {
    pub client_id: usize,
    pub accel_id: u16,
    pub fragments: u32,
    pub send_us: f64,
    pub recv_us: f64,
    #[serde(serialize_with = "status_name")]
    pub status: Status,
}

fn status_name<S: serde::Serializer>(s: &Status, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(s.as_str())
}

impl RequestRow {
    pub fn latency_us(&self) -> f64 {
        self.recv_us - self.send_us
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    /// Attempts sent after the warm-up, in completion order per client.
    pub rows: Vec<RequestRow>,
    pub completed: u64,
    pub dropped: u64,
    pub errors: u64,
    pub latency_p25_us: f64,
    pub latency_p50_us: f64,
    pub latency_p75_us: f64,
    /// Measured window: from the end of warm-up to the last response.
    pub window: Duration,
    pub throughput_rps: f64,
    pub goodput_bytes_per_s: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn run_loadgen(cfg: &LoadgenConfig) -> Result<LoadReport, ClientError> {
    let payload = vec![0xa5u8; cfg.payload_bytes()];
    let wire = encode_request(cfg.accelerator_id, cfg.parameters, &payload)?;
    let mut clients = Vec::with_capacity(cfg.clients);
    for _ in 0..cfg.clients {
        clients.push(Client::connect(cfg.addr, cfg.fragment_bytes)?);
    }
    let barrier = Barrier::new(cfg.clients);
    let start = Instant::now();
    let results: Vec<Result<Vec<RequestRow>, ClientError>> = thread::scope(|s| {
        let handles: Vec<_> = clients
            .into_iter()
            .enumerate()
            .map(|(id, client)| {
                let (wire, barrier) = (&wire, &barrier);
                s.spawn(move || drive(id, client, wire, cfg, start, barrier))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(summarize(rows, cfg))
}

fn drive(
    id: usize,
    mut client: Client,
    wire: &[u8],
    cfg: &LoadgenConfig,
    start: Instant,
    barrier: &Barrier,
) -> Result<Vec<RequestRow>, ClientError> {
    let mut rng = rand::rng();
    let mut rows = Vec::new();
    let mut done = 0u64;
    barrier.wait();
    loop {
        let more = match cfg.stop {
            Stop::Requests(n) => done < n,
            Stop::Duration(d) => start.elapsed() < d,
        };
        if !more {
            break;
        }
        let sent = start.elapsed();
        client.send(wire)?;
        let response = client.receive()?;
        let recv = start.elapsed();
        rows.push(RequestRow {
            client_id: id,
            accel_id: cfg.accelerator_id,
            fragments: cfg.fragments,
            send_us: sent.as_secs_f64() * 1e6,
            recv_us: recv.as_secs_f64() * 1e6,
            status: response.status,
        });
        match response.status {
            Status::Ok => done += 1,
            Status::DroppedNoBuffer => thread::sleep(rng.random_range(cfg.retry_delay.0..=cfg.retry_delay.1)),
            _ => done += 1,
        }
    }
    Ok(rows)
}

fn summarize(all: Vec<RequestRow>, cfg: &LoadgenConfig) -> LoadReport {
    let warmup_us = cfg.warmup.as_secs_f64() * 1e6;
    let rows: Vec<RequestRow> = all.into_iter().filter(|r| r.send_us >= warmup_us).collect();
    let ok: Vec<&RequestRow> = rows.iter().filter(|r| r.status == Status::Ok).collect();
    let mut lat: Vec<f64> = ok.iter().map(|r| r.latency_us()).collect();
    lat.sort_by(f64::total_cmp);
    let begin = rows.iter().map(|r| r.send_us).fold(f64::INFINITY, f64::min).max(warmup_us);
    let end = rows.iter().map(|r| r.recv_us).fold(0.0, f64::max);
    let window = Duration::from_secs_f64(((end - begin) / 1e6).max(0.0));
    let secs = window.as_secs_f64();
    let completed = ok.len() as u64;
    LoadReport {
        completed,
        dropped: rows.iter().filter(|r| r.status == Status::DroppedNoBuffer).count() as u64,
        errors: rows
            .iter()
            .filter(|r| !matches!(r.status, Status::Ok | Status::DroppedNoBuffer))
            .count() as u64,
        latency_p25_us: percentile(&lat, 0.25),
        latency_p50_us: percentile(&lat, 0.5),
        latency_p75_us: percentile(&lat, 0.75),
        window,
        throughput_rps: if secs > 0.0 { completed as f64 / secs } else { 0.0 },
        goodput_bytes_per_s: if secs > 0.0 {
            (completed * cfg.payload_bytes() as u64) as f64 / secs
        } else {
            0.0
        },
        rows,
    }
}

/// One CSV row per request attempt, followed by `#`-prefixed summary lines.
pub fn write_report<W: Write>(mut out: W, report: &LoadReport) -> std::io::Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for row in &report.rows {
            w.serialize(row)?;
        }
        if report.rows.is_empty() {
            w.write_record(["client_id", "accel_id", "fragments", "send_us", "recv_us", "status"])?;
        }
        w.flush()?;
    }
    writeln!(out, "# completed,{}", report.completed)?;
    writeln!(out, "# dropped,{}", report.dropped)?;
    writeln!(out, "# errors,{}", report.errors)?;
    writeln!(out, "# latency_p25_us,{:.3}", report.latency_p25_us)?;
    writeln!(out, "# latency_p50_us,{:.3}", report.latency_p50_us)?;
    writeln!(out, "# latency_p75_us,{:.3}", report.latency_p75_us)?;
    writeln!(out, "# window_s,{:.6}", report.window.as_secs_f64())?;
    writeln!(out, "# throughput_rps,{:.3}", report.throughput_rps)?;
    writeln!(out, "# goodput_bytes_per_s,{:.3}", report.goodput_bytes_per_s)?;
    Ok(())
}
