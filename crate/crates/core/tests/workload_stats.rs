use offrac_core::engine::Nanos;
use offrac_core::workload::{Categorical, Client, Delay, SizeDistribution, WorkloadConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Chi-square critical value for 3 degrees of freedom at p = 0.001.
const CHI2_DF3: f64 = 16.27;

fn chi_square(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn size_distributions_fit_their_weights() {
    for dist in [SizeDistribution::SmallDominant, SizeDistribution::EvenMix, SizeDistribution::LargeDominant] {
        let weights = dist.weights();
        let sampler = Categorical::new(&weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0u64; weights.len()];
        for _ in 0..200_000 {
            let f = sampler.sample(&mut rng);
            counts[weights.iter().position(|w| w.0 == f).unwrap()] += 1;
        }
        let probs: Vec<f64> = weights.iter().map(|w| w.1).collect();
        let stat = chi_square(&counts, &probs);
        assert!(stat < CHI2_DF3, "{}: chi2 {stat}", dist.label());
    }
}

#[test]
fn client_request_mix_fits_configuration() {
    let cfg = WorkloadConfig {
        clients: 1,
        request_mix: vec![(0, 0.5), (1, 0.25), (2, 0.25)],
        size_distribution: SizeDistribution::EvenMix,
        requests_per_client: 50_000,
        ..WorkloadConfig::default()
    };
    let mut client = Client::new(0, &cfg, 9).unwrap();
    let mut accel = [0u64; 3];
    let mut frags = [0u64; 4];
    for _ in 0..50_000 {
        let plan = client.next_request(&cfg, Nanos::ZERO);
        accel[usize::from(plan.header.accelerator_id)] += 1;
        frags[[1, 2, 4, 8].iter().position(|&f| f == plan.fragments).unwrap()] += 1;
        client.release();
    }
    // Two degrees of freedom for the mix: critical value 13.82 at p = 0.001.
    assert!(chi_square(&accel, &[0.5, 0.25, 0.25]) < 13.82);
    assert!(chi_square(&frags, &[0.25; 4]) < CHI2_DF3);
}

#[test]
fn delays_have_configured_means_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    for (delay, lo, hi) in [
        (Delay::uniform(5.0, 15.0), 5.0, 15.0),
        (Delay::uniform(80.0, 120.0), 80.0, 120.0),
        (Delay::Exponential { mean_us: 2.0 }, 0.0, f64::INFINITY),
    ] {
        let xs: Vec<f64> = (0..n).map(|_| delay.sample(&mut rng).as_micros_f64()).collect();
        assert!(xs.iter().all(|&x| x >= lo && x <= hi));
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - delay.mean_us()).abs() / delay.mean_us() < 0.01, "{delay:?}: {mean}");
    }
}
