//! Small closed meshes used by the body model generator and by tests.

use std::collections::HashMap;

use super::mesh::TemplateMesh;

/// Unit cube centered at the origin, two triangles per side, outward winding.
pub fn cube() -> TemplateMesh {
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        vertices.push([
            if i & 1 == 0 { -0.5 } else { 0.5 },
            if i & 2 == 0 { -0.5 } else { 0.5 },
            if i & 4 == 0 { -0.5 } else { 0.5 },
        ]);
    }
    let faces = vec![
        [0, 2, 3], [0, 3, 1], // z-
        [4, 5, 7], [4, 7, 6], // z+
        [0, 1, 5], [0, 5, 4], // y-
        [2, 6, 7], [2, 7, 3], // y+
        [0, 4, 6], [0, 6, 2], // x-
        [1, 3, 7], [1, 7, 5], // x+
    ];
    TemplateMesh::new(vertices, faces).expect("cube is a valid mesh")
}

/// Unit icosphere after `level` rounds of 4-to-1 subdivision. Vertex counts
/// are 12, 42, 162, 642, 2562, ...
pub fn icosphere(level: usize) -> TemplateMesh {
    let (vertices, faces) = icosphere_raw(level);
    TemplateMesh::new(vertices, faces).expect("icosphere is a valid mesh")
}

pub fn icosphere_vertex_count(level: usize) -> usize {
    10 * 4usize.pow(level as u32) + 2
}

pub(crate) fn icosphere_raw(level: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoints.entry(key).or_insert_with(|| {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    vertices.push(normalize(&[
                        (pa[0] + pb[0]) * 0.5,
                        (pa[1] + pb[1]) * 0.5,
                        (pa[2] + pb[2]) * 0.5,
                    ]));
                    vertices.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (vertices, faces)
}

fn normalize(v: &[f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for level in 0..4 {
            let m = icosphere(level);
            assert_eq!(m.num_vertices(), icosphere_vertex_count(level));
            assert_eq!(m.num_faces(), 20 * 4usize.pow(level as u32));
        }
    }

    #[test]
    fn cube_is_closed() {
        let m = cube();
        assert_eq!(m.edges().len(), 18);
    }
}
