use std::time::Duration;

use offrac_core::accelerators::AcceleratorSpec;
use offrac_core::policies::SelectorPolicyKind;
use offrac_net::{run_loadgen, LoadReport, LoadgenConfig, Server, ServerConfig, Stop};

const SERVICE_US: f64 = 2000.0;

fn saturate(slots: usize, clients: usize, per_client: u64) -> LoadReport {
    let mut cfg = ServerConfig::loopback(vec![AcceleratorSpec::modeled(0, SERVICE_US, slots)]);
    cfg.selector = SelectorPolicyKind::Jsq;
    let server = Server::start(cfg).unwrap();
    let report = run_loadgen(&LoadgenConfig::new(server.local_addr(), clients, 0, Stop::Requests(per_client))).unwrap();
    server.shutdown();
    report
}

#[test]
fn single_client_sees_unloaded_latency() {
    let r = saturate(1, 1, 30);
    assert_eq!((r.completed, r.dropped), (30, 0));
    assert!(r.latency_p50_us >= SERVICE_US && r.latency_p50_us < SERVICE_US * 1.5, "{}", r.latency_p50_us);
}

#[test]
fn saturated_slots_approach_modeled_rate() {
    for slots in [1, 2] {
        let r = saturate(slots, 8, 20);
        let per_slot = r.throughput_rps / slots as f64;
        let ideal = 1e6 / SERVICE_US;
        assert!((per_slot - ideal).abs() / ideal < 0.10, "{slots} slots: {per_slot} rps per slot");
    }
}

#[test]
fn loadgen_duration_mode_with_warmup() {
    let mut cfg = ServerConfig::loopback(vec![AcceleratorSpec::modeled(0, 500.0, 1)]);
    cfg.selector = SelectorPolicyKind::Rr;
    let server = Server::start(cfg).unwrap();
    let mut load = LoadgenConfig::new(server.local_addr(), 2, 0, Stop::Duration(Duration::from_millis(400)));
    load.warmup = Duration::from_millis(100);
    let r = run_loadgen(&load).unwrap();
    server.shutdown();
    assert!(r.rows.iter().all(|row| row.send_us >= 100_000.0));
    assert!(r.completed > 100);
    assert!(r.window <= Duration::from_millis(400));
}
