use offrac_core::accelerators::{execute_logit, execute_minmax, execute_topk, topk_params};
use offrac_core::protocol::PARAMETER_BYTES;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NO_PARAMS: [u8; PARAMETER_BYTES] = [0; PARAMETER_BYTES];

fn decode_i32(b: &[u8]) -> Vec<i32> {
    b.chunks_exact(4).map(|c| i32::from_be_bytes(c.try_into().unwrap())).collect()
}

fn decode_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect()
}

fn encode_f32(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_be_bytes()).collect()
}

fn close(got: f32, want: f64) -> bool {
    let diff = (f64::from(got) - want).abs();
    diff <= 1e-5 * want.abs() || diff <= 1e-6
}

#[test]
fn topk_equals_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let n = rng.random_range(1..=512);
        let span = if rng.random_bool(0.3) { 16 } else { i32::MAX };
        let values: Vec<i32> = (0..n).map(|_| rng.random_range(-span..span)).collect();
        let k = rng.random_range(1..=n as u32);
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        let got = decode_i32(&execute_topk(&payload, &topk_params(k)).unwrap());
        let mut want = values.clone();
        want.sort_by(|a, b| b.cmp(a));
        want.truncate(k as usize);
        assert_eq!(got, want);
    }
}

#[test]
fn logit_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let xs: Vec<f32> = (0..rng.random_range(1..256))
            .map(|_| rng.random_range(1e-4f32..1.0 - 1e-4))
            .collect();
        let got = decode_f32(&execute_logit(&encode_f32(&xs), &NO_PARAMS).unwrap());
        for (x, y) in xs.iter().zip(got) {
            let x = f64::from(*x);
            assert!(close(y, (x / (1.0 - x)).ln()), "logit({x}) = {y}");
        }
    }
}

#[test]
fn minmax_matches_scalar_oracle_and_spans_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let mut xs: Vec<f32> = (0..rng.random_range(2..256)).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        xs[0] = xs[1] + 1.0;
        let got = decode_f32(&execute_minmax(&encode_f32(&xs), &NO_PARAMS).unwrap());
        let lo = xs.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        for (x, y) in xs.iter().zip(&got) {
            assert!(close(*y, (f64::from(*x) - lo) / (hi - lo)));
        }
        let min = got.iter().copied().fold(f32::INFINITY, f32::min);
        let max = got.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((min, max), (0.0, 1.0));
    }
}
