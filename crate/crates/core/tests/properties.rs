use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;

use cmr_core::bodymodel::{make_mini_model, orthogonality_error, rodrigues, so3_project, BodyParams, Pose};
use cmr_core::diffcore::{Tape, Tensor};
use cmr_core::meshgraph::primitives::icosphere;
use cmr_core::meshgraph::{build_adjacency, sparse_dense_multiply, SparseMatrix, TemplateMesh};
use cmr_core::regressor::graph_conv;

fn mat(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

fn max_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn so3_projection_is_a_rotation(v in prop::collection::vec(-3.0f64..3.0, 9)) {
        let r = so3_project(&mat(&v)).rotation;
        prop_assert!(orthogonality_error(&r) < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn so3_projection_idempotent_and_scale_invariant(v in prop::collection::vec(-3.0f64..3.0, 9), c in 0.01f64..100.0) {
        let m = mat(&v);
        let r = so3_project(&m).rotation;
        prop_assert!(max_diff(&so3_project(&r).rotation, &r) < 1e-10);
        prop_assert!(max_diff(&so3_project(&(m * c)).rotation, &r) < 1e-10);
    }

    #[test]
    fn rodrigues_matches_quaternion(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let aa = Vector3::new(x, y, z);
        let oracle = UnitQuaternion::from_scaled_axis(aa).to_rotation_matrix().into_inner();
        prop_assert!(max_diff(&rodrigues(&aa), &oracle) < 1e-12);
    }

    #[test]
    fn rodrigues_is_2pi_periodic(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        let aa = Vector3::new(x, y, z);
        prop_assume!(aa.norm() > 1e-3);
        let shifted = aa + aa.normalize() * (2.0 * PI);
        prop_assert!(max_diff(&rodrigues(&aa), &rodrigues(&shifted)) < 1e-12);
    }

    #[test]
    fn sparse_matches_dense(seed in 0u64..1000) {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        let n = 50;
        let dense: Vec<f64> = (0..n * n).map(|_| if next() < 0.1 { next() * 2.0 - 1.0 } else { 0.0 }).collect();
        let x: Vec<f64> = (0..n * 3).map(|_| next() - 0.5).collect();
        let s = SparseMatrix::from_dense(n, n, &dense).unwrap();
        let got = sparse_dense_multiply(&s, &x, n, 3).unwrap();
        for r in 0..n {
            for c in 0..3 {
                let expect: f64 = (0..n).map(|k| dense[r * n + k] * x[k * 3 + c]).sum();
                prop_assert!((got[r * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_commutes_with_relabeling(seed in 0u64..500) {
        let mesh = icosphere(1);
        let n = mesh.num_vertices();
        let perm = permutation(n, seed);
        let mut vertices = vec![[0.0; 3]; n];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = mesh.vertices()[old];
        }
        let faces = mesh.faces().iter().map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]]).collect();
        let relabeled = build_adjacency(&TemplateMesh::new(vertices, faces).unwrap()).into_matrix();
        let original = build_adjacency(&mesh).into_matrix();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(original.get(i, j), relabeled.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn graph_conv_is_permutation_equivariant(seed in 0u64..500) {
        let mesh = icosphere(1);
        let n = mesh.num_vertices();
        let perm = permutation(n, seed);
        let adj = build_adjacency(&mesh).into_matrix();
        let padj = Arc::new(adj.permute_symmetric(&perm).unwrap());
        let adj = Arc::new(adj);
        let x: Vec<f64> = (0..n * 4).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect();
        let mut px = vec![0.0; n * 4];
        for i in 0..n {
            px[perm[i] * 4..perm[i] * 4 + 4].copy_from_slice(&x[i * 4..i * 4 + 4]);
        }
        let w = Tensor::new([4, 5], (0..20).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        let b = Tensor::new([1, 5], vec![0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let run = |a: &Arc<SparseMatrix>, xs: Vec<f64>| {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new([n, 4], xs).unwrap());
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let y = graph_conv(&tape, a, x, w, b).unwrap();
            let out = tape.value(y).clone();
            out
        };
        let y = run(&adj, x);
        let py = run(&padj, px);
        for i in 0..n {
            for c in 0..5 {
                prop_assert!((y.get2(i, c) - py.get2(perm[i], c)).abs() < 1e-12);
            }
        }
    }
}

/// `perm[old] = new`, a seeded Fisher–Yates shuffle.
fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
    for i in (1..n).rev() {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        p.swap(i, (s % (i as u64 + 1)) as usize);
    }
    p
}

#[test]
fn shape_blend_is_linear_at_rest_pose() {
    let model = make_mini_model(1, 162, 6, 3).unwrap();
    let at = |beta: Vec<f64>| {
        let p = BodyParams { pose: Pose::AxisAngle(vec![Vector3::zeros(); 6]), beta };
        model.lbs_forward(&p).unwrap()
    };
    let t = at(vec![0.0; 3]);
    let a = at(vec![0.7, -0.2, 0.0]);
    let b = at(vec![-0.3, 0.5, 1.1]);
    let ab = at(vec![0.4, 0.3, 1.1]);
    for i in 0..t.len() {
        assert!(((ab[i] - t[i]) - (a[i] - t[i]) - (b[i] - t[i])).abs() < 1e-12);
    }
}

#[test]
fn root_rotation_is_rigid_for_any_shape() {
    // With only the root rotated, every body shape turns rigidly about its root joint.
    let model = make_mini_model(2, 162, 6, 3).unwrap();
    let mut pose = vec![Vector3::zeros(); 6];
    pose[0] = Vector3::new(0.3, -0.8, 0.2);
    let r = rodrigues(&pose[0]);
    for beta in [vec![0.0; 3], vec![1.0, -0.5, 0.25]] {
        let rest = model.lbs_forward(&BodyParams { pose: Pose::AxisAngle(vec![Vector3::zeros(); 6]), beta: beta.clone() }).unwrap();
        let posed = model.lbs_forward(&BodyParams { pose: Pose::AxisAngle(pose.clone()), beta: beta.clone() }).unwrap();
        let root = &model.rest_joints(&beta)[..3];
        let root = Vector3::new(root[0], root[1], root[2]);
        for (p, q) in rest.chunks_exact(3).zip(posed.chunks_exact(3)) {
            let expect = r * (Vector3::new(p[0], p[1], p[2]) - root) + root;
            assert!((expect - Vector3::new(q[0], q[1], q[2])).abs().max() < 1e-12);
        }
    }
}
