use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmr_core::metrics::{mpjpe, per_vertex_error, procrustes_align, reconstruction_error};

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn transform(points: &[f64], s: f64, q: &UnitQuaternion<f64>, t: &Vector3<f64>) -> Vec<f64> {
    points
        .chunks_exact(3)
        .flat_map(|p| {
            let v = q * Vector3::new(p[0], p[1], p[2]) * s + t;
            [v.x, v.y, v.z]
        })
        .collect()
}

#[test]
fn procrustes_recovers_random_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let gt = random_points(&mut rng, 8);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = UnitQuaternion::from_scaled_axis(axis * 3.0);
        let s = rng.random_range(0.2..5.0);
        let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let pred = transform(&gt, s, &q, &t);
        let (sim, err) = procrustes_align(&pred, &gt).unwrap();
        assert!(err < 1e-10, "error {err}");
        assert!((sim.s * s - 1.0).abs() < 1e-9, "scale {} vs {}", sim.s, 1.0 / s);
        assert!(reconstruction_error(&pred, &gt).unwrap() < 1e-10);
    }
}

#[test]
fn root_aligned_offsets_by_hand() {
    // Root at the origin in both; joint 1 offset by (3, 4, 0) → 5 / 2 joints.
    let gt = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let pred = [2.0, 2.0, 2.0, 6.0, 7.0, 3.0];
    assert!((mpjpe(&pred, &gt).unwrap() - 2.5).abs() < 1e-15);
}

#[test]
fn per_vertex_error_is_mean_l1_norm() {
    let gt = [0.0; 6];
    let pred = [1.0, -2.0, 0.5, 0.0, 0.0, -3.0];
    assert!((per_vertex_error(&pred, &gt).unwrap() - (3.5 + 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn alignment_never_hurts_on_noisy_similarities() {
    // Procrustes minimizes the squared distance; the mean distance it reports
    // stays below the root-aligned one for moderate noise around a similarity.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let gt = random_points(&mut rng, 8);
        let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.4, -0.3, 0.8));
        let mut pred = transform(&gt, 1.3, &q, &Vector3::new(0.2, 0.1, -0.4));
        for x in &mut pred {
            *x += rng.random_range(-0.05..0.05);
        }
        assert!(reconstruction_error(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap());
    }
}
