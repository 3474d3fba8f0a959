//! Acceptance gate. Every criterion is evaluated in sequence (the server
//! scaling check is timing sensitive and must not share the CPU with
//! simulator sweeps), one PASS/FAIL line is printed for each, and the test
//! fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use offrac_core::accelerators::{execute_logit, execute_minmax, execute_topk, topk_params, AcceleratorKind, AcceleratorSpec};
use offrac_core::experiments::{
    csv_bytes, gd1_point, manifest, metrics, offered_records, percentile, run_manifest, Class, Manifest, PointRun,
    ACCEL_A, ACCEL_B, ACCEL_C, DEFAULT_SEEDS, GD1_REQUESTS, GD1_RHOS, SCENARIOS,
};
use offrac_core::oracle::{oracle_sweep, simulate_gd1, QueueModel};
use offrac_core::policies::SelectorPolicyKind;
use offrac_core::protocol::{decode_header, encode_header, RequestHeader, Status, PARAMETER_BYTES};
use offrac_core::sim::{self, RequestRecord};
use offrac_net::client::payload_for_fragments;
use offrac_net::{run_loadgen, Client, LoadgenConfig, Server, ServerConfig, Stop};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances.
const UTIL_LO: f64 = 0.55;
const UTIL_HI: f64 = 0.65;
const DECOUPLING_MIN_SEEDS: usize = 9;
const POLICY_GAP: f64 = 0.05;
const SINGLE_QUEUE_MULTI_DELTA: f64 = 0.10;
const ISOLATION_VARIATION: f64 = 0.20;
const SELECTOR_MEDIAN_TOL: f64 = 0.20;
const ORACLE_TOL: f64 = 0.15;
const CODEC_HEADERS: usize = 1_000_000;
const TOPK_INSTANCES: usize = 1000;
const SCALAR_REL_TOL: f64 = 1e-5;
const SCALING_LO: f64 = 1.8;
const SCALING_HI: f64 = 2.0;
const PLATEAU_FACTOR: f64 = 1.5;
const MODELED_SERVICE_US: f64 = 2000.0;

type Outcome = (bool, String);

fn seeds() -> Vec<u64> {
    DEFAULT_SEEDS.collect()
}

fn sweep(name: &str) -> (Manifest, Vec<PointRun>) {
    let m = manifest(name, &seeds()).expect("known scenario");
    let runs = run_manifest(&m).expect("scenario runs");
    (m, runs)
}

fn point_index(m: &Manifest, label: &str) -> usize {
    m.points
        .iter()
        .position(|p| p.label == label)
        .unwrap_or_else(|| panic!("no point {label} in {}", m.scenario))
}

fn run_of<'a>(runs: &'a [PointRun], point: usize, seed: u64) -> &'a PointRun {
    runs.iter().find(|r| r.point == point && r.seed == seed).expect("run exists")
}

/// Drop rate over several classes and points of one seed.
fn pooled_drop_rate(runs: &[PointRun], points: &[usize], seed: u64, classes: &[Class]) -> f64 {
    let (mut offered, mut dropped) = (0u64, 0u64);
    for &p in points {
        for &c in classes {
            let m = metrics(&run_of(runs, p, seed).result, c);
            offered += m.offered;
            dropped += m.dropped;
        }
    }
    if offered == 0 {
        0.0
    } else {
        dropped as f64 / offered as f64
    }
}

/// Seed-pooled sorted samples of one point.
fn pooled_samples(runs: &[PointRun], point: usize, class: Class, f: impl Fn(&RequestRecord) -> Option<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = runs
        .iter()
        .filter(|r| r.point == point)
        .flat_map(|r| offered_records(&r.result, class).filter_map(&f).collect::<Vec<_>>())
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

fn latency_us(r: &RequestRecord) -> Option<f64> {
    r.latency.map(|n| n.as_micros_f64())
}

fn wait_us(r: &RequestRecord) -> Option<f64> {
    r.queue_wait().map(|n| n.as_micros_f64())
}

const MULTI: [Class; 3] = [Class::Fragments(2), Class::Fragments(4), Class::Fragments(8)];
const DISTS: [&str; 3] = ["small", "even", "large"];

fn c1_utilization() -> Outcome {
    let (m, runs) = sweep("reassembly_utilization");
    let mut ok = true;
    let mut exact = 0usize;
    let mut utils = Vec::new();
    for run in &runs {
        let label = &m.points[run.point].label;
        if label.starts_with("mode=reassembled") {
            for r in run.result.records.iter().filter(|r| r.completed()) {
                exact += 1;
                ok &= r.occupancy() == Some(r.service_time);
            }
        } else if label == "mode=immediate;frags=8" {
            let bf = metrics(&run.result, Class::All).busy_fraction.unwrap_or(0.0);
            ok &= (UTIL_LO..=UTIL_HI).contains(&bf);
            utils.push(bf);
        }
    }
    let lo = utils.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = utils.iter().copied().fold(0.0, f64::max);
    (
        ok && utils.len() == seeds().len(),
        format!("{exact} reassembled requests busy 100% of occupancy; immediate n=8 utilization {lo:.4}..{hi:.4} (bounds {UTIL_LO}..{UTIL_HI})"),
    )
}

fn c2_throughput() -> Outcome {
    let (m, runs) = sweep("reassembly_utilization");
    let mut ok = true;
    let mut worst = String::new();
    for seed in seeds() {
        let mut margins = Vec::new();
        for n in [2, 4, 8] {
            let completed = |mode: &str| {
                metrics(&run_of(&runs, point_index(&m, &format!("mode={mode};frags={n}")), seed).result, Class::All).completed
                    as f64
            };
            let (r, i) = (completed("reassembled"), completed("immediate"));
            ok &= r >= i;
            margins.push((r - i) / i);
        }
        ok &= margins.windows(2).all(|w| w[1] > w[0]);
        if seed == 0 {
            worst = format!("seed 0 margins {:.4}/{:.4}/{:.4}", margins[0], margins[1], margins[2]);
        }
    }
    (ok, format!("reassembled >= immediate with growing margin over n=2,4,8 in every seed; {worst}"))
}

fn c3_decoupling() -> Outcome {
    let (m, runs) = sweep("buffer_decoupling");
    let per = point_index(&m, "dist=large;buffers=per_accelerator");
    let dec = point_index(&m, "dist=large;buffers=decoupled");
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in seeds() {
        let (a, b) = (pooled_drop_rate(&runs, &[per], seed, &MULTI), pooled_drop_rate(&runs, &[dec], seed, &MULTI));
        wins += usize::from(b < a);
        detail.push(format!("{b:.3}<{a:.3}"));
    }
    (
        wins >= DECOUPLING_MIN_SEEDS,
        format!("decoupled beats per-accelerator in {wins}/10 seeds (need {DECOUPLING_MIN_SEEDS}); {}", detail[..3].join(" ")),
    )
}

fn c4_input_policy() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["input_policy", "input_policy_large"] {
        let (m, runs) = sweep(name);
        let points = |policy: &str| -> Vec<usize> { (4..=8).map(|c| point_index(&m, &format!("policy={policy};clients={c}"))).collect() };
        let (naive, elig, jsb) = (points("naive_rr"), points("eligible_rr"), points("jsb"));
        let mut max_gap: f64 = 0.0;
        let mut naive_wins = 0;
        for seed in seeds() {
            let n = pooled_drop_rate(&runs, &naive, seed, &[Class::All]);
            let e = pooled_drop_rate(&runs, &elig, seed, &[Class::All]);
            let j = pooled_drop_rate(&runs, &jsb, seed, &[Class::All]);
            naive_wins += usize::from(n > e);
            max_gap = max_gap.max((e - j).abs());
        }
        ok &= naive_wins == seeds().len() && max_gap <= POLICY_GAP;
        detail.push(format!("{name}: naive>eligible {naive_wins}/10, max |eligible-jsb| {max_gap:.4}"));
    }
    (ok, detail.join("; "))
}

fn c5_single_fragment() -> Outcome {
    let (m, runs) = sweep("single_fragment");
    let mut ok = true;
    let mut single_drops = 0;
    let mut max_delta: f64 = 0.0;
    for dist in DISTS {
        let on = point_index(&m, &format!("dist={dist};single_queue=on"));
        let off = point_index(&m, &format!("dist={dist};single_queue=off"));
        for seed in seeds() {
            single_drops += metrics(&run_of(&runs, on, seed).result, Class::Fragments(1)).dropped;
            let delta = (pooled_drop_rate(&runs, &[on], seed, &MULTI) - pooled_drop_rate(&runs, &[off], seed, &MULTI)).abs();
            max_delta = max_delta.max(delta);
        }
    }
    ok &= single_drops == 0 && max_delta <= SINGLE_QUEUE_MULTI_DELTA;
    (ok, format!("single-fragment drops with queue {single_drops}; max multi-fragment drop-rate change {max_delta:.4}"))
}

fn c6_isolation() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["isolation", "isolation_large"] {
        let (m, runs) = sweep(name);
        let medians = |accel: u16| -> Vec<f64> {
            (0..m.points.len())
                .map(|p| percentile(&pooled_samples(&runs, p, Class::Accelerator(accel), latency_us), 0.5).unwrap_or(f64::NAN))
                .collect()
        };
        let a = medians(ACCEL_A);
        let a_ok = a.windows(2).all(|w| w[1] >= w[0]);
        let mut parts = vec![format!("A {:?}", a.iter().map(|x| x.round()).collect::<Vec<_>>())];
        ok &= a_ok;
        for (label, accel) in [("B", ACCEL_B), ("C", ACCEL_C)] {
            let v = medians(accel);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let variation = (hi - lo) / lo;
            ok &= variation <= ISOLATION_VARIATION;
            parts.push(format!("{label} variation {variation:.3}"));
        }
        detail.push(format!("{name}: {}", parts.join(", ")));
    }
    (ok, detail.join("; "))
}

fn c7_selector() -> Outcome {
    let mut ok = true;
    let mut spread_somewhere = false;
    let mut misses = Vec::new();
    for name in ["selector_policy", "selector_policy_large"] {
        let (m, runs) = sweep(name);
        for dist in DISTS {
            let rr = point_index(&m, &format!("dist={dist};selector=rr"));
            let jsq = point_index(&m, &format!("dist={dist};selector=jsq"));
            for accel in [ACCEL_A, ACCEL_B, ACCEL_C] {
                let a = percentile(&pooled_samples(&runs, rr, Class::Accelerator(accel), wait_us), 0.5).unwrap_or(0.0);
                let b = percentile(&pooled_samples(&runs, jsq, Class::Accelerator(accel), wait_us), 0.5).unwrap_or(0.0);
                let within = (a == 0.0 && b == 0.0) || (a - b).abs() <= SELECTOR_MEDIAN_TOL * b;
                if !within {
                    misses.push(format!("{name}/{dist}/accel {accel}: rr {a:.2} vs jsq {b:.2}"));
                }
                ok &= within;
            }
            let rr_all = pooled_samples(&runs, rr, Class::All, wait_us);
            let jsq_all = pooled_samples(&runs, jsq, Class::All, wait_us);
            if let (Some(rmin), Some(rmax), Some(jmin), Some(jmax)) = (rr_all.first(), rr_all.last(), jsq_all.first(), jsq_all.last()) {
                spread_somewhere |= rmin <= jmin && rmax >= jmax;
            }
        }
    }
    let detail = if misses.is_empty() {
        "all class medians within 20%".to_string()
    } else {
        format!("outside 20%: {}", misses.join("; "))
    };
    (ok && spread_somewhere, format!("{detail}; RR wider than JSQ on some distribution: {spread_somewhere}"))
}

fn c8_oracle() -> Outcome {
    let rows = oracle_sweep(1.0, &GD1_RHOS, GD1_REQUESTS as usize, 0).expect("stable loads");
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &rows {
        ok &= r.rel_error <= ORACLE_TOL;
        parts.push(format!("rho {:.1}: kingman {:.4} sim {:.4} err {:.1}%", r.rho, r.analytic_wait, r.empirical_wait, 100.0 * r.rel_error));
    }
    for rho in GD1_RHOS {
        let result = sim::run(&gd1_point(rho).config, 0).expect("gd1 scenario runs");
        let waits: Vec<f64> = result.records.iter().filter_map(wait_us).collect();
        let mean = waits.iter().sum::<f64>() / waits.len() as f64;
        let lindley = simulate_gd1(&QueueModel::from_rho(rho, 1.0).unwrap(), GD1_REQUESTS as usize, 0).unwrap();
        let err = (mean - lindley).abs() / lindley;
        ok &= err <= ORACLE_TOL;
        parts.push(format!("e2e rho {rho:.1}: {mean:.4} vs {lindley:.4} ({:.1}%)", 100.0 * err));
    }
    (ok, parts.join("; "))
}

fn c9_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for _ in 0..CODEC_HEADERS {
        let mut params = [0u8; PARAMETER_BYTES];
        rng.fill(&mut params[..]);
        let h = RequestHeader::new(rng.random(), rng.random_range(1..=u16::MAX), params);
        failures += usize::from(decode_header(&encode_header(&h)) != Ok(h));
    }
    let server = Server::start(ServerConfig::loopback(vec![AcceleratorSpec {
        type_id: 0,
        kind: AcceleratorKind::Echo,
        instances: 1,
        queue_capacity_bytes: 1 << 20,
    }]))
    .expect("server starts");
    let mut client = Client::connect(server.local_addr(), 4096).expect("connects");
    let mut echo_failures = 0;
    for fragments in 1..=8u32 {
        for _ in 0..5 {
            let len = rng.random_range(payload_for_fragments(fragments - 1, 4096) + 1..=payload_for_fragments(fragments, 4096));
            let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let r = client.call(0, [0; PARAMETER_BYTES], &payload).expect("call");
            let exact = r.status == Status::Ok && r.payload[..len] == payload[..] && r.payload[len..].iter().all(|&b| b == 0);
            echo_failures += usize::from(!exact);
        }
    }
    server.shutdown();
    (
        failures == 0 && echo_failures == 0,
        format!("{CODEC_HEADERS} header round trips, {failures} failures; loopback echo 1-8 fragments, {echo_failures} mismatches"),
    )
}

fn c10_accelerators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut topk_bad = 0;
    for _ in 0..TOPK_INSTANCES {
        let n = rng.random_range(1..=1024);
        let values: Vec<i32> = (0..n).map(|_| rng.random()).collect();
        let k = rng.random_range(1..=n as u32);
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        let got: Vec<i32> = execute_topk(&payload, &topk_params(k))
            .expect("valid k")
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        let mut want = values;
        want.sort_by(|a, b| b.cmp(a));
        want.truncate(k as usize);
        topk_bad += usize::from(got != want);
    }
    let floats = |b: Vec<u8>| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect() };
    let enc = |v: &[f32]| -> Vec<u8> { v.iter().flat_map(|x| x.to_be_bytes()).collect() };
    let rel = |got: f32, want: f64| (f64::from(got) - want).abs() / want.abs().max(1e-30);
    let mut worst: f64 = 0.0;
    let mut span_ok = true;
    for _ in 0..200 {
        let xs: Vec<f32> = (0..256).map(|_| rng.random_range(1e-3f32..0.999)).collect();
        for (x, y) in xs.iter().zip(floats(execute_logit(&enc(&xs), &[0; PARAMETER_BYTES]).unwrap())) {
            let x = f64::from(*x);
            let want = (x / (1.0 - x)).ln();
            if want.abs() > 1e-3 {
                worst = worst.max(rel(y, want));
            }
        }
        let ys: Vec<f32> = (0..256).map(|_| rng.random_range(-100.0f32..100.0)).collect();
        let out = floats(execute_minmax(&enc(&ys), &[0; PARAMETER_BYTES]).unwrap());
        let lo = f64::from(ys.iter().copied().fold(f32::INFINITY, f32::min));
        let hi = f64::from(ys.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        for (x, y) in ys.iter().zip(&out) {
            let want = (f64::from(*x) - lo) / (hi - lo);
            if want > 1e-3 {
                worst = worst.max(rel(*y, want));
            }
        }
        let omin = out.iter().copied().fold(f32::INFINITY, f32::min);
        let omax = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        span_ok &= omin == 0.0 && omax == 1.0;
    }
    (
        topk_bad == 0 && worst <= SCALAR_REL_TOL && span_ok,
        format!("top-k mismatches {topk_bad}/{TOPK_INSTANCES}; worst logit/min-max relative error {worst:.2e}; min-max spans [0,1]: {span_ok}"),
    )
}

fn modeled_server(slots: usize) -> Server {
    let mut cfg = ServerConfig::loopback(vec![AcceleratorSpec::modeled(0, MODELED_SERVICE_US, slots)]);
    cfg.selector = SelectorPolicyKind::Jsq;
    Server::start(cfg).expect("server starts")
}

fn closed_loop(server: &Server, clients: usize, per_client: u64) -> offrac_net::LoadReport {
    run_loadgen(&LoadgenConfig::new(server.local_addr(), clients, 0, Stop::Requests(per_client))).expect("load runs")
}

fn c11_scaling() -> Outcome {
    let mut throughput = Vec::new();
    let mut departures = Vec::new();
    for slots in [1usize, 2, 4] {
        let server = modeled_server(slots);
        throughput.push(closed_loop(&server, 16, 25).throughput_rps);
        let mut plateau = None;
        let mut departure = None;
        for clients in [1usize, 2, 4, 8, 16] {
            let p50 = closed_loop(&server, clients, 15).latency_p50_us;
            let base = *plateau.get_or_insert(p50);
            if departure.is_none() && p50 > PLATEAU_FACTOR * base {
                departure = Some(clients);
            }
        }
        server.shutdown();
        departures.push(departure.unwrap_or(usize::MAX));
    }
    let r1 = throughput[1] / throughput[0];
    let r2 = throughput[2] / throughput[1];
    let ratios_ok = [r1, r2].iter().all(|r| (SCALING_LO..=SCALING_HI).contains(r));
    let shifts = departures.windows(2).all(|w| w[1] > w[0]);
    (
        ratios_ok && shifts,
        format!(
            "throughput {:.0}/{:.0}/{:.0} rps, ratios {r1:.3} and {r2:.3} (bounds {SCALING_LO}..{SCALING_HI}); latency departs at {:?} clients for 1/2/4 slots",
            throughput[0], throughput[1], throughput[2], departures
        ),
    )
}

fn c12_determinism() -> Outcome {
    let mut differing = Vec::new();
    for name in SCENARIOS {
        let m = manifest(name, &[0, 1]).expect("known scenario");
        if csv_bytes(&m).expect("runs") != csv_bytes(&m).expect("runs") {
            differing.push(*name);
        }
    }
    (
        differing.is_empty(),
        format!("{} scenarios re-run byte-identically; differing: {differing:?}", SCENARIOS.len() - differing.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("reassembly utilization", c1_utilization),
        ("throughput ordering", c2_throughput),
        ("buffer decoupling", c3_decoupling),
        ("input policy ordering", c4_input_policy),
        ("single-fragment queue", c5_single_fragment),
        ("performance isolation", c6_isolation),
        ("selector policy", c7_selector),
        ("queueing oracle", c8_oracle),
        ("protocol conformance", c9_protocol),
        ("accelerator oracles", c10_accelerators),
        ("server scaling shape", c11_scaling),
        ("determinism", c12_determinism),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| (false, "panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let _ = writeln!(
            err,
            "criterion {:>2} {} {name} ({secs:.1}s): {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    let _ = err.flush();
    std::thread::sleep(Duration::from_millis(10));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
