use laser_kv::config::ModelShape;
use laser_kv::trace::{
    decode_trace, encode_trace, generate_trace, load_trace, save_trace, NeedleSpec,
};
use proptest::prelude::*;

fn arb_trace() -> impl Strategy<Value = laser_kv::KvTrace> {
    (
        1usize..=3,
        1usize..=3,
        1usize..=12,
        1usize..=64,
        any::<u64>(),
    )
        .prop_flat_map(|(l, h, d, t, seed)| {
            let needles = proptest::collection::btree_map(0..t, -1.0f32..=1.0, 0..=t.min(4));
            (Just((l, h, d, t, seed)), needles)
        })
        .prop_filter_map(
            "cosine unattainable at d = 1",
            |((l, h, d, t, seed), needles)| {
                let specs: Vec<NeedleSpec> = needles
                    .into_iter()
                    .map(|(p, c)| NeedleSpec::new(p, c))
                    .collect();
                generate_trace(ModelShape::new(l, h, d), t, &specs, seed).ok()
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bytes_round_trip(trace in arb_trace()) {
        let bytes = encode_trace(&trace).unwrap();
        let back = decode_trace(&bytes).unwrap();
        prop_assert_eq!(&back, &trace);
        prop_assert_eq!(encode_trace(&back).unwrap(), bytes);
    }

    #[test]
    fn flipped_payload_byte_is_rejected(trace in arb_trace(), at in any::<prop::sample::Index>()) {
        let mut bytes = encode_trace(&trace).unwrap();
        let payload = 3 * 4 * trace.num_tokens() * trace.shape().token_stride() + 4;
        let i = bytes.len() - payload + at.index(payload);
        bytes[i] ^= 0x5A;
        prop_assert!(decode_trace(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected(trace in arb_trace(), at in any::<prop::sample::Index>()) {
        let bytes = encode_trace(&trace).unwrap();
        let cut = at.index(bytes.len());
        prop_assert!(decode_trace(&bytes[..cut]).is_err());
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.lkvt");
    let trace = generate_trace(
        ModelShape::new(2, 2, 16),
        300,
        &[NeedleSpec::new(120, 0.7)],
        5,
    )
    .unwrap();
    save_trace(&trace, &path).unwrap();
    assert_eq!(load_trace(&path).unwrap(), trace);
}
