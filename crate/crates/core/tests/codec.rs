use offrac_core::protocol::{decode_header, encode_header, fragment_request, RequestHeader, ResponseHeader, Status, PARAMETER_BYTES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn million_random_headers_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0u32;
    for _ in 0..1_000_000 {
        let mut parameters = [0u8; PARAMETER_BYTES];
        rng.fill(&mut parameters[..]);
        let h = RequestHeader::new(rng.random(), rng.random_range(1..=u16::MAX), parameters);
        if decode_header(&encode_header(&h)) != Ok(h) {
            failures += 1;
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn response_headers_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100_000 {
        let accel = rng.random();
        let h = match rng.random_range(0..4) {
            0 => ResponseHeader::ok(accel, rng.random()),
            1 => ResponseHeader::error(Status::DroppedNoBuffer, accel),
            2 => ResponseHeader::error(Status::UnknownAccelerator, accel),
            _ => ResponseHeader::error(Status::Malformed, accel),
        };
        assert_eq!(ResponseHeader::decode(&h.encode()), Ok(h));
    }
}

#[test]
fn fragments_concatenate_to_the_wire_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2_000 {
        let len: usize = rng.random_range(64..40_000);
        let wire: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let fb: usize = rng.random_range(64..9000);
        let frags = fragment_request(7, &wire, fb);
        assert_eq!(frags.len(), len.div_ceil(fb));
        assert!(frags.iter().all(|f| f.len() <= fb && f.connection_id == 7));
        let joined: Vec<u8> = frags.iter().flat_map(|f| f.payload.iter().copied()).collect();
        assert_eq!(joined, wire);
    }
}
