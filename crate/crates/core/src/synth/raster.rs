//! Software rasterizer for silhouette and part-label images under the
//! weak-perspective camera.

use crate::diffcore::Tensor;
use crate::metrics::CameraParams;

/// Center of pixel `(row, col)` in normalized image units: `x` grows to the
/// right, `y` grows upward, and the image spans `[−1, 1]²`.
pub fn pixel_center(row: usize, col: usize, resolution: usize) -> [f64; 2] {
    let r = resolution as f64;
    [-1.0 + (2 * col + 1) as f64 / r, 1.0 - (2 * row + 1) as f64 / r]
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Label of a face: the most common vertex label, ties to the smallest.
fn face_label(labels: &[usize], f: &[usize; 3]) -> usize {
    let l = [labels[f[0]], labels[f[1]], labels[f[2]]];
    if l[1] == l[2] {
        l[1]
    } else if l[0] == l[1] || l[0] == l[2] {
        l[0]
    } else {
        *l.iter().min().unwrap()
    }
}

/// What to write for covered pixels.
#[derive(Debug, Clone, Copy)]
pub enum Shading<'a> {
    Silhouette,
    /// Per-vertex part label and the number of planes.
    Parts(&'a [usize], usize),
}

/// Renders a mesh (flat `N×3` vertices) into an `(R·R)×C` image.
///
/// Triangles of either orientation are filled where all three edge
/// functions share a sign (pixel centers on an edge count as inside). The
/// z-buffer keeps the largest interpolated pre-projection `z`; the first
/// face wins exact depth ties.
pub fn rasterize(
    vertices: &[f64],
    faces: &[[usize; 3]],
    shading: Shading<'_>,
    cam: &CameraParams,
    resolution: usize,
) -> Tensor {
    let channels = match shading {
        Shading::Silhouette => 1,
        Shading::Parts(_, p) => p,
    };
    let mut image = vec![0.0; resolution * resolution * channels];
    let mut depth = vec![f64::NEG_INFINITY; resolution * resolution];
    let mut owner: Vec<Option<usize>> = vec![None; resolution * resolution];
    let proj = |i: usize| [cam.s * vertices[i * 3] + cam.t[0], cam.s * vertices[i * 3 + 1] + cam.t[1]];
    let r = resolution as f64;
    for (fi, f) in faces.iter().enumerate() {
        let (a, b, c) = (proj(f[0]), proj(f[1]), proj(f[2]));
        let area = edge(a, b, c);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let za = vertices[f[0] * 3 + 2];
        let zb = vertices[f[1] * 3 + 2];
        let zc = vertices[f[2] * 3 + 2];
        // Pixel range covering the triangle's bounding box.
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let col_lo = (((xmin + 1.0) * r / 2.0 - 0.5).floor().max(0.0)) as usize;
        let col_hi = (((xmax + 1.0) * r / 2.0 - 0.5).ceil().min(r - 1.0)).max(-1.0);
        let row_lo = (((1.0 - ymax) * r / 2.0 - 0.5).floor().max(0.0)) as usize;
        let row_hi = (((1.0 - ymin) * r / 2.0 - 0.5).ceil().min(r - 1.0)).max(-1.0);
        if col_hi < 0.0 || row_hi < 0.0 {
            continue;
        }
        for row in row_lo..=row_hi as usize {
            for col in col_lo..=col_hi as usize {
                let p = pixel_center(row, col, resolution);
                let (w0, w1, w2) = (edge(b, c, p), edge(c, a, p), edge(a, b, p));
                let inside = if area > 0.0 {
                    w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
                } else {
                    w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
                };
                if !inside {
                    continue;
                }
                let z = (w0 * za + w1 * zb + w2 * zc) / area;
                let px = row * resolution + col;
                if z > depth[px] {
                    depth[px] = z;
                    owner[px] = Some(fi);
                }
            }
        }
    }
    for (px, o) in owner.iter().enumerate() {
        if let Some(fi) = o {
            let ch = match shading {
                Shading::Silhouette => 0,
                Shading::Parts(labels, _) => face_label(labels, &faces[*fi]),
            };
            image[px * channels + ch] = 1.0;
        }
    }
    Tensor::new([resolution * resolution, channels], image).unwrap()
}
