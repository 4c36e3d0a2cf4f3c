//! Triangle meshes with fixed topology, plus the OBJ subset we read and write.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reference mesh whose deformation is regressed. Vertices are stored as
/// `[x, y, z]` rows, faces as 0-based vertex index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl TemplateMesh {
    /// Validates and wraps vertex/face arrays.
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TemplateMesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Vertices flattened row-major (N×3).
    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Same topology, new coordinates. Coordinates are not re-validated for
    /// degeneracy; only the count must match.
    pub fn with_vertices(&self, flat: &[f64]) -> Result<TemplateMesh> {
        if flat.len() != self.vertices.len() * 3 {
            return Err(Error::IncompatibleTemplate {
                expected: self.vertices.len(),
                actual: flat.len() / 3,
            });
        }
        Ok(TemplateMesh {
            vertices: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            faces: self.faces.clone(),
        })
    }

    /// Sorted, deduplicated undirected edges `(lo, hi)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Axis-aligned bounding box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = bbox(&self.vertices);
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }

    fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n == 0 || self.faces.is_empty() {
            return Err(Error::InvalidMesh("mesh needs at least one vertex and one face".into()));
        }
        if let Some(i) = self.vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} has a non-finite coordinate")));
        }
        let mut edge_faces: HashMap<(usize, usize), usize> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references a vertex index >= {n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex")));
            }
            if triangle_area(&self.vertices[f[0]], &self.vertices[f[1]], &self.vertices[f[2]]) <= 1e-14 {
                return Err(Error::InvalidMesh(format!("face {fi} has zero area")));
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let count = edge_faces.entry((a.min(b), a.max(b))).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(Error::InvalidMesh(format!(
                        "edge ({}, {}) is shared by more than two faces",
                        a.min(b),
                        a.max(b)
                    )));
                }
            }
        }
        if !is_connected(n, &self.edges()) {
            return Err(Error::InvalidMesh("edge graph is not connected".into()));
        }
        Ok(())
    }

    /// Writes the mesh as OBJ text (1-based face indices).
    pub fn to_obj_string(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            // `{:?}` prints the shortest representation that round-trips exactly.
            let _ = writeln!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_obj_string())?;
        Ok(())
    }
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TemplateMesh> {
    parse_obj(&fs::read_to_string(path)?)
}

/// Parses the `v` / triangle `f` subset of Wavefront OBJ. Other record types
/// are skipped; `#` starts a comment.
pub fn parse_obj(text: &str) -> Result<TemplateMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<&str> = tokens.collect();
                if coords.len() < 3 || coords.len() > 4 {
                    return Err(Error::MalformedObj {
                        line: line_no,
                        msg: format!("expected 3 coordinates, found {}", coords.len()),
                    });
                }
                let mut v = [0.0; 3];
                for (k, c) in coords.iter().take(3).enumerate() {
                    v[k] = c.parse().map_err(|_| Error::MalformedObj {
                        line: line_no,
                        msg: format!("bad coordinate {c:?}"),
                    })?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(Error::UnsupportedFace { line: line_no, count: refs.len() });
                }
                let mut f = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    let head = r.split('/').next().unwrap_or("");
                    let idx: usize = head.parse().map_err(|_| Error::MalformedObj {
                        line: line_no,
                        msg: format!("bad vertex reference {r:?}"),
                    })?;
                    if idx == 0 {
                        return Err(Error::MalformedObj {
                            line: line_no,
                            msg: "vertex indices are 1-based".into(),
                        });
                    }
                    f[k] = idx - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    TemplateMesh::new(vertices, faces)
}

pub(crate) fn bbox(vertices: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

pub(crate) fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn triangle_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    0.5 * norm3(&cross3(&sub3(b, a), &sub3(c, a)))
}

pub(crate) fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return true;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut components = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}
