use laser_kv::config::ModelShape;
use laser_kv::lsh::{build_tables, collision_scores, QueryRepresentative};
use laser_kv::trace::KvTrace;

const D: usize = 8;

/// Collision fraction of keys at the given angles to `e1`, each its own token.
fn fractions(angles: &[f64], rounds: usize, bits: usize, seed: u64) -> Vec<f64> {
    let shape = ModelShape::new(1, 1, D);
    let keys: Vec<f32> = angles
        .iter()
        .flat_map(|a| {
            let mut k = vec![0.0f32; D];
            k[0] = a.cos() as f32;
            k[1] = a.sin() as f32;
            k
        })
        .collect();
    let n = angles.len();
    let trace = KvTrace::from_parts(
        shape,
        n,
        keys,
        vec![0.0; n * D],
        vec![0.0; n * D],
        Vec::new(),
        0,
    )
    .unwrap();
    let tables = build_tables(shape, rounds, bits, seed).unwrap();
    let mut q = vec![0.0; D];
    q[0] = 1.0;
    let rep = QueryRepresentative::from_vectors(q, D);
    let cands: Vec<usize> = (0..n).collect();
    collision_scores(&tables, &trace, &cands, &rep)
        .unwrap()
        .scores
}

#[test]
fn mean_collision_decreases_with_angle() {
    let angles: Vec<f64> = (0..7)
        .map(|i| i as f64 * std::f64::consts::PI / 6.0)
        .collect();
    let mut mean = vec![0.0; angles.len()];
    for seed in 0..100 {
        for (m, f) in mean.iter_mut().zip(fractions(&angles, 64, 2, seed)) {
            *m += f / 100.0;
        }
    }
    assert!((mean[0] - 1.0).abs() < 1e-12);
    assert_eq!(mean[6], 0.0);
    for w in mean.windows(2) {
        assert!(w[0] > w[1], "{mean:?}");
    }
}

#[test]
fn mean_collision_decreases_with_bits() {
    let angles = [std::f64::consts::PI / 4.0];
    let means: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&k| {
            (0..50)
                .map(|s| fractions(&angles, 256, k, s)[0])
                .sum::<f64>()
                / 50.0
        })
        .collect();
    for w in means.windows(2) {
        assert!(w[0] > w[1], "{means:?}");
    }
}
