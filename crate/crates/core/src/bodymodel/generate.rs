//! Procedural articulated body: capsule limbs around a kinematic tree,
//! surfaced by radially projecting an icosphere onto their union.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::meshgraph::primitives::{icosphere, icosphere_vertex_count};
use crate::meshgraph::{SparseMatrix, TemplateMesh};

use super::model::MiniBodyModel;

pub const MAX_JOINTS: usize = 12;
pub const MIN_JOINTS: usize = 4;

/// Rest location and parent of every joint the generator knows about, in
/// topological order. A model with `J` joints uses the first `J`.
const SKELETON: [([f64; 3], Option<usize>); MAX_JOINTS] = [
    ([0.0, 0.0, 0.0], None),         // pelvis
    ([0.0, 0.25, 0.0], Some(0)),     // spine
    ([0.0, 0.55, 0.0], Some(1)),     // neck
    ([0.2, 0.5, 0.0], Some(1)),      // left shoulder
    ([-0.2, 0.5, 0.0], Some(1)),     // right shoulder
    ([0.1, -0.05, 0.0], Some(0)),    // left hip
    ([-0.1, -0.05, 0.0], Some(0)),   // right hip
    ([0.12, -0.45, 0.0], Some(5)),   // left knee
    ([-0.12, -0.45, 0.0], Some(6)),  // right knee
    ([0.45, 0.5, 0.0], Some(3)),     // left elbow
    ([-0.45, 0.5, 0.0], Some(4)),    // right elbow
    ([0.0, 0.72, 0.0], Some(2)),     // head
];

struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    bone: usize,
}

fn capsules(stretch: &[f64; 4]) -> Vec<Capsule> {
    let [arm, leg, torso, head] = *stretch;
    let cap = |a: [f64; 3], b: [f64; 3], radius: f64, bone: usize| Capsule { a, b, radius, bone };
    let mut out = vec![
        cap([0.0, -0.02, 0.0], [0.0, 0.25 * torso, 0.0], 0.15, 0),
        cap([0.0, 0.25 * torso, 0.0], [0.0, 0.5 * torso, 0.0], 0.16, 1),
        cap([0.0, 0.62 * torso, 0.0], [0.0, 0.62 * torso + 0.12 * head, 0.0], 0.1 * head, 11),
        cap([0.0, 0.5 * torso, 0.0], [0.0, 0.6 * torso, 0.0], 0.06, 2),
    ];
    for side in [1.0, -1.0] {
        let (shoulder, elbow, hip, knee) = if side > 0.0 { (3, 9, 5, 7) } else { (4, 10, 6, 8) };
        let sy = 0.5 * torso;
        out.push(cap([0.2 * side, sy, 0.0], [(0.2 + 0.25 * arm) * side, sy, 0.0], 0.06, shoulder));
        out.push(cap(
            [(0.2 + 0.25 * arm) * side, sy, 0.0],
            [(0.2 + 0.5 * arm) * side, sy, 0.0],
            0.05,
            elbow,
        ));
        out.push(cap([0.1 * side, -0.05, 0.0], [0.12 * side, -0.05 - 0.4 * leg, 0.0], 0.08, hip));
        out.push(cap(
            [0.12 * side, -0.05 - 0.4 * leg, 0.0],
            [0.13 * side, -0.05 - 0.8 * leg, 0.0],
            0.065,
            knee,
        ));
    }
    out
}

fn segment_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn inside(p: &[f64; 3], caps: &[Capsule]) -> bool {
    caps.iter().any(|c| segment_distance(p, &c.a, &c.b) <= c.radius)
}

/// Maps a skeleton joint to the nearest ancestor that exists in a `J`-joint model.
fn owner(mut bone: usize, joints: usize) -> usize {
    while bone >= joints {
        bone = SKELETON[bone].1.expect("only the root lacks a parent");
    }
    bone
}

fn icosphere_level_for(n_target: usize) -> Result<usize> {
    if n_target < icosphere_vertex_count(0) || n_target > icosphere_vertex_count(5) {
        return Err(Error::Config(format!(
            "template size {n_target} outside the supported range {}..={}",
            icosphere_vertex_count(0),
            icosphere_vertex_count(5)
        )));
    }
    let level = (0..=5)
        .min_by_key(|&l| (icosphere_vertex_count(l) as i64 - n_target as i64).abs())
        .unwrap();
    Ok(level)
}

/// Builds a seeded procedural body with about `n_target` vertices, `joints`
/// joints and `betas` shape directions.
pub fn make_mini_model(seed: u64, n_target: usize, joints: usize, betas: usize) -> Result<MiniBodyModel> {
    if !(MIN_JOINTS..=MAX_JOINTS).contains(&joints) {
        return Err(Error::Config(format!("joint count must be in {MIN_JOINTS}..={MAX_JOINTS}, got {joints}")));
    }
    if betas == 0 {
        return Err(Error::Config("at least one shape coefficient is required".into()));
    }
    let level = icosphere_level_for(n_target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stretch = [
        rng.random_range(0.95..1.05),
        rng.random_range(0.95..1.05),
        rng.random_range(0.95..1.05),
        rng.random_range(0.95..1.05),
    ];
    let caps = capsules(&stretch);

    let sphere = icosphere(level);
    let center = [0.0, 0.2 * stretch[2], 0.0];
    let step = 2e-3;
    let mut raw: Vec<[f64; 3]> = Vec::with_capacity(sphere.num_vertices());
    for d in sphere.vertices() {
        // Outermost crossing of the union along the ray.
        let mut t = 1.6;
        while t > 0.0 {
            let p = [center[0] + t * d[0], center[1] + t * d[1], center[2] + t * d[2]];
            if inside(&p, &caps) {
                break;
            }
            t -= step;
        }
        raw.push([center[0] + t * d[0], center[1] + t * d[1], center[2] + t * d[2]]);
    }

    // Center the bounding box and scale its diagonal to 2.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &raw {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    let scale = 2.0 / diag;
    let to_model = |p: &[f64; 3]| [(p[0] - mid[0]) * scale, (p[1] - mid[1]) * scale, (p[2] - mid[2]) * scale];
    let vertices: Vec<[f64; 3]> = raw.iter().map(to_model).collect();
    let template = TemplateMesh::new(vertices.clone(), sphere.faces().to_vec())?;
    let n = template.num_vertices();

    // Skinning: softmax of −d²/τ over capsule distances, pooled per owning joint.
    let tau = 0.01;
    let mut skin = vec![0.0; n * joints];
    for (i, p) in raw.iter().enumerate() {
        let d2: Vec<f64> = caps.iter().map(|c| segment_distance(p, &c.a, &c.b).powi(2)).collect();
        let dmin = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let row = &mut skin[i * joints..(i + 1) * joints];
        for (c, d) in caps.iter().zip(&d2) {
            row[owner(c.bone, joints)] += (-(d - dmin) / tau).exp();
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= total);
        let total: f64 = row.iter().sum();
        let fix = 1.0 - total;
        let big = (0..joints).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        row[big] += fix;
    }

    // Joint regressor: inverse-distance weights over the nearest vertices.
    let k_near = 8.min(n);
    let mut triplets = Vec::with_capacity(joints * k_near);
    for (j, (pos, _)) in SKELETON.iter().take(joints).enumerate() {
        let jp = to_model(&joint_location(pos, &stretch));
        let mut order: Vec<(f64, usize)> = vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (((v[0] - jp[0]).powi(2) + (v[1] - jp[1]).powi(2) + (v[2] - jp[2]).powi(2)).sqrt(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &order[..k_near];
        let inv: Vec<f64> = near.iter().map(|(d, _)| 1.0 / (d + 1e-3)).collect();
        let total: f64 = inv.iter().sum();
        let mut ws: Vec<(usize, f64)> = near.iter().zip(&inv).map(|((_, i), w)| (*i, w / total)).collect();
        ws.sort_by_key(|x| x.0);
        let sum: f64 = ws.iter().map(|x| x.1).sum();
        ws[0].1 += 1.0 - sum;
        triplets.extend(ws.into_iter().map(|(i, w)| (j, i, w)));
    }
    let regressor = SparseMatrix::from_triplets(joints, n, &triplets)?;

    // Smooth shape directions: a random affine field plus one low-frequency wave.
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut shape_dirs = vec![0.0; n * 3 * betas];
    for b in 0..betas {
        let lin: Vec<f64> = (0..9).map(|_| 0.5 * normal.sample(&mut rng)).collect();
        let freq: Vec<f64> = (0..3).map(|_| 2.0 * normal.sample(&mut rng)).collect();
        let phase: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        for (i, v) in vertices.iter().enumerate() {
            let wave = freq[0] * v[0] + freq[1] * v[1] + freq[2] * v[2];
            for k in 0..3 {
                let affine = lin[k * 3] * v[0] + lin[k * 3 + 1] * v[1] + lin[k * 3 + 2] * v[2];
                shape_dirs[(i * 3 + k) * betas + b] = 0.04 * (affine + 0.5 * (wave + phase[k]).sin());
            }
        }
    }

    let parents = SKELETON.iter().take(joints).map(|(_, p)| *p).collect();
    MiniBodyModel::new(template, shape_dirs, betas, regressor, parents, skin)
}

/// Skeleton joint positions follow the same limb stretching as the capsules.
fn joint_location(p: &[f64; 3], stretch: &[f64; 4]) -> [f64; 3] {
    let [arm, leg, torso, _] = *stretch;
    let side = p[0].signum();
    if p[1] >= 0.45 && p[0].abs() > 0.15 {
        // shoulders and elbows
        let reach = (p[0].abs() - 0.2) / 0.25;
        [side * (0.2 + 0.25 * arm * reach), 0.5 * torso, p[2]]
    } else if p[1] < -0.01 && p[0].abs() > 0.05 {
        // hips and knees
        let drop = (-0.05 - p[1]) / 0.4;
        [p[0], -0.05 - 0.4 * leg * drop, p[2]]
    } else {
        [p[0], p[1] * torso, p[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = make_mini_model(3, 162, 8, 4).unwrap();
        let b = make_mini_model(3, 162, 8, 4).unwrap();
        assert_eq!(a, b);
        let c = make_mini_model(4, 162, 8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn template_is_normalized() {
        let m = make_mini_model(0, 642, 8, 4).unwrap();
        assert_eq!(m.num_vertices(), 642);
        assert!((m.template().bbox_diagonal() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(make_mini_model(0, 642, 3, 4).is_err());
        assert!(make_mini_model(0, 642, 13, 4).is_err());
        assert!(make_mini_model(0, 642, 8, 0).is_err());
        assert!(make_mini_model(0, 5, 8, 4).is_err());
    }

    #[test]
    fn every_joint_skins_some_vertex() {
        let m = make_mini_model(0, 642, 8, 4).unwrap();
        let labels = m.part_labels();
        for j in 0..8 {
            assert!(labels.contains(&j), "joint {j} owns no vertex");
        }
    }
}
