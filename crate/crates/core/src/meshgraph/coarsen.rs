//! Quadric-error edge-collapse decimation producing the downsample (`down`)
//! and upsample (`up`) matrices between a mesh and its coarse version.
//!
//! Collapses are half-edge collapses: the surviving vertex keeps its original
//! position, so `down` is a pure selection matrix and `down · up = I`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::mesh::{cross3, dot3, norm3, sub3, TemplateMesh};
use super::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseningPair {
    /// `N_c × N` binary selection.
    pub down: SparseMatrix,
    /// `N × N_c` barycentric interpolation.
    pub up: SparseMatrix,
    pub coarse_mesh: TemplateMesh,
    /// Original index of each coarse vertex, ascending.
    pub kept: Vec<usize>,
}

/// Symmetric 4×4 quadric, upper triangle.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: [f64; 3], d: f64, weight: f64) -> Self {
        let [a, b, c] = n;
        Quadric([
            a * a * weight, a * b * weight, a * c * weight, a * d * weight,
            b * b * weight, b * c * weight, b * d * weight,
            c * c * weight, c * d * weight,
            d * d * weight,
        ])
    }

    fn add(&self, other: &Quadric) -> Quadric {
        let mut out = *self;
        for (o, x) in out.0.iter_mut().zip(other.0.iter()) {
            *o += x;
        }
        out
    }

    fn eval(&self, p: &[f64; 3]) -> f64 {
        let q = &self.0;
        let [x, y, z] = *p;
        q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x
            + q[4] * y * y + 2.0 * q[5] * y * z + 2.0 * q[6] * y
            + q[7] * z * z + 2.0 * q[8] * z
            + q[9]
    }
}

struct Decimator {
    pos: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    vert_alive: Vec<bool>,
    quadrics: Vec<Quadric>,
    alive_count: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    lo: usize,
    hi: usize,
    remove: usize,
    keep: usize,
}

impl Decimator {
    fn new(mesh: &TemplateMesh) -> Self {
        let n = mesh.num_vertices();
        let pos = mesh.vertices().to_vec();
        let faces = mesh.faces().to_vec();
        let mut vert_faces = vec![BTreeSet::new(); n];
        let mut quadrics = vec![Quadric::default(); n];
        for (fi, f) in faces.iter().enumerate() {
            let normal = cross3(&sub3(&pos[f[1]], &pos[f[0]]), &sub3(&pos[f[2]], &pos[f[0]]));
            let len = norm3(&normal);
            let unit = [normal[0] / len, normal[1] / len, normal[2] / len];
            let d = -dot3(&unit, &pos[f[0]]);
            let q = Quadric::from_plane(unit, d, 0.5 * len);
            for &v in f {
                vert_faces[v].insert(fi);
                quadrics[v] = quadrics[v].add(&q);
            }
        }
        Decimator {
            pos,
            face_alive: vec![true; faces.len()],
            faces,
            vert_faces,
            vert_alive: vec![true; n],
            quadrics,
            alive_count: n,
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        self.vert_faces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&u| u != v)
            .collect()
    }

    fn edge_face_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.face_alive[fi] {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    fn candidates(&self, edge_counts: &BTreeMap<(usize, usize), usize>) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = edge_counts
            .keys()
            .map(|&(lo, hi)| {
                let q = self.quadrics[lo].add(&self.quadrics[hi]);
                // Moving `hi` onto `lo` vs `lo` onto `hi`; ties keep the lower index.
                let keep_lo = q.eval(&self.pos[lo]);
                let keep_hi = q.eval(&self.pos[hi]);
                if keep_hi < keep_lo {
                    Candidate { cost: keep_hi, lo, hi, remove: lo, keep: hi }
                } else {
                    Candidate { cost: keep_lo, lo, hi, remove: hi, keep: lo }
                }
            })
            .collect();
        out.sort_by(|a, b| a.cost.total_cmp(&b.cost).then((a.lo, a.hi).cmp(&(b.lo, b.hi))));
        out
    }

    fn is_boundary_vertex(&self, v: usize, edge_counts: &BTreeMap<(usize, usize), usize>) -> bool {
        self.neighbors(v)
            .into_iter()
            .any(|u| edge_counts.get(&(u.min(v), u.max(v))) == Some(&1))
    }

    fn is_valid(&self, c: &Candidate, edge_counts: &BTreeMap<(usize, usize), usize>) -> bool {
        let (u, v) = (c.remove, c.keep);
        let shared: Vec<usize> = self.vert_faces[u]
            .intersection(&self.vert_faces[v])
            .copied()
            .collect();
        let opposite: BTreeSet<usize> = shared
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&w| w != u && w != v)
            .collect();
        let common: BTreeSet<usize> = self.neighbors(u).intersection(&self.neighbors(v)).copied().collect();
        if common != opposite {
            return false;
        }
        let edge_is_boundary = edge_counts.get(&(c.lo, c.hi)) == Some(&1);
        if !edge_is_boundary && self.is_boundary_vertex(u, edge_counts) {
            return false;
        }
        // A closed surface cannot shrink below a tetrahedron.
        if self.alive_count <= 4 {
            return false;
        }
        for &fi in &self.vert_faces[u] {
            let f = self.faces[fi];
            if f.contains(&v) {
                continue;
            }
            let old = self.face_normal(&f, None);
            let new = self.face_normal(&f, Some((u, v)));
            let new_len = norm3(&new);
            if new_len <= 1e-12 * (norm3(&old) + 1e-300).max(1e-12) || dot3(&old, &new) <= 0.0 {
                return false;
            }
        }
        true
    }

    fn face_normal(&self, f: &[usize; 3], replace: Option<(usize, usize)>) -> [f64; 3] {
        let p = |i: usize| {
            let idx = match replace {
                Some((from, to)) if i == from => to,
                _ => i,
            };
            self.pos[idx]
        };
        let (a, b, c) = (p(f[0]), p(f[1]), p(f[2]));
        cross3(&sub3(&b, &a), &sub3(&c, &a))
    }

    fn collapse(&mut self, c: &Candidate) {
        let (u, v) = (c.remove, c.keep);
        let incident: Vec<usize> = self.vert_faces[u].iter().copied().collect();
        for fi in incident {
            if self.faces[fi].contains(&v) {
                self.face_alive[fi] = false;
                for &w in &self.faces[fi] {
                    self.vert_faces[w].remove(&fi);
                }
            } else {
                for slot in self.faces[fi].iter_mut() {
                    if *slot == u {
                        *slot = v;
                    }
                }
                self.vert_faces[v].insert(fi);
            }
        }
        self.vert_faces[u].clear();
        self.quadrics[v] = self.quadrics[v].add(&self.quadrics[u]);
        self.vert_alive[u] = false;
        self.alive_count -= 1;
    }
}

/// Decimates `mesh` to `round(N / factor)` vertices.
pub fn coarsen(mesh: &TemplateMesh, factor: f64) -> Result<CoarseningPair> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Decimation(format!("factor must be >= 1, got {factor}")));
    }
    let n = mesh.num_vertices();
    let target = (n as f64 / factor).round() as usize;
    if target == n {
        return Ok(CoarseningPair {
            down: SparseMatrix::identity(n),
            up: SparseMatrix::identity(n),
            coarse_mesh: mesh.clone(),
            kept: (0..n).collect(),
        });
    }
    if target < 4 {
        return Err(Error::Decimation(format!(
            "target of {target} vertices is below the minimum of 4"
        )));
    }

    let mut dec = Decimator::new(mesh);
    while dec.alive_count > target {
        let counts = dec.edge_face_counts();
        let chosen = dec
            .candidates(&counts)
            .into_iter()
            .find(|c| dec.is_valid(c, &counts))
            .ok_or_else(|| {
                Error::Decimation(format!(
                    "no valid collapse left at {} vertices (target {target})",
                    dec.alive_count
                ))
            })?;
        dec.collapse(&chosen);
    }

    let kept: Vec<usize> = (0..n).filter(|&i| dec.vert_alive[i]).collect();
    let mut remap = vec![usize::MAX; n];
    for (ci, &i) in kept.iter().enumerate() {
        remap[i] = ci;
    }
    let coarse_faces: Vec<[usize; 3]> = dec
        .faces
        .iter()
        .zip(&dec.face_alive)
        .filter(|(_, &alive)| alive)
        .map(|(f, _)| [remap[f[0]], remap[f[1]], remap[f[2]]])
        .collect();
    let coarse_vertices: Vec<[f64; 3]> = kept.iter().map(|&i| dec.pos[i]).collect();
    let coarse_mesh = TemplateMesh::new(coarse_vertices, coarse_faces)
        .map_err(|e| Error::Decimation(format!("decimated mesh is invalid: {e}")))?;

    let down_triplets: Vec<_> = kept.iter().enumerate().map(|(ci, &i)| (ci, i, 1.0)).collect();
    let down = SparseMatrix::from_triplets(kept.len(), n, &down_triplets)?;

    let mut up_triplets = Vec::new();
    for i in 0..n {
        if remap[i] != usize::MAX {
            up_triplets.push((i, remap[i], 1.0));
            continue;
        }
        let (face, bary) = closest_face(&coarse_mesh, &mesh.vertices()[i]);
        let f = coarse_mesh.faces()[face];
        let sum: f64 = bary.iter().sum();
        for k in 0..3 {
            let w = bary[k] / sum;
            if w > 0.0 {
                up_triplets.push((i, f[k], w));
            }
        }
    }
    let up = SparseMatrix::from_triplets(n, kept.len(), &up_triplets)?;
    Ok(CoarseningPair { down, up, coarse_mesh, kept })
}

/// Nearest face to `p` and the barycentric coordinates of the closest point.
fn closest_face(mesh: &TemplateMesh, p: &[f64; 3]) -> (usize, [f64; 3]) {
    let v = mesh.vertices();
    let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
    for (fi, f) in mesh.faces().iter().enumerate() {
        let bary = closest_point_barycentric(p, &v[f[0]], &v[f[1]], &v[f[2]]);
        let q = [
            bary[0] * v[f[0]][0] + bary[1] * v[f[1]][0] + bary[2] * v[f[2]][0],
            bary[0] * v[f[0]][1] + bary[1] * v[f[1]][1] + bary[2] * v[f[2]][1],
            bary[0] * v[f[0]][2] + bary[1] * v[f[1]][2] + bary[2] * v[f[2]][2],
        ];
        let d = sub3(p, &q);
        let dist = dot3(&d, &d);
        if dist < best.0 {
            best = (dist, fi, bary);
        }
    }
    (best.1, best.2)
}

/// Barycentric coordinates of the point of triangle `abc` closest to `p`
/// (region classification by Voronoi features).
pub(crate) fn closest_point_barycentric(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> [f64; 3] {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(&ab, &ap);
    let d2 = dot3(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub3(p, b);
    let d3 = dot3(&ab, &bp);
    let d4 = dot3(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return [1.0 - t, t, 0.0];
    }
    let cp = sub3(p, c);
    let d5 = dot3(&ab, &cp);
    let d6 = dot3(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return [1.0 - t, 0.0, t];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - t, t];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}
