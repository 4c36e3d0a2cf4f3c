//! Rotation utilities: axis-angle ↔ matrix conversion and projection of
//! arbitrary 3×3 matrices onto SO(3).

use nalgebra::{Matrix3, Vector3, SVD};

use crate::diffcore::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `R = I + sinθ K + (1 − cosθ) K²` with `K` the skew matrix of the unit axis.
pub fn rodrigues(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta = aa.norm();
    if theta < 1e-8 {
        let k = skew(aa);
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let k = skew(&(aa / theta));
    Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * (k * k)
}

/// Inverse of [`rodrigues`], returning an angle in `[0, π]`.
pub fn axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    // Quaternion extraction (largest-component branch) is stable near θ = π.
    let trace = r.trace();
    let (w, x, y, z);
    if trace > r[(0, 0)] && trace > r[(1, 1)] && trace > r[(2, 2)] {
        let s = (1.0 + trace).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    let (w, v) = if w < 0.0 { (-w, Vector3::new(-x, -y, -z)) } else { (w, Vector3::new(x, y, z)) };
    let sin_half = v.norm();
    if sin_half < 1e-12 {
        return v * 2.0;
    }
    let theta = 2.0 * sin_half.atan2(w);
    v * (theta / sin_half)
}

/// Result of [`so3_project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub rotation: Matrix3<f64>,
    /// A vanishing singular value, or a pair of signed singular values
    /// summing to zero: the projection is not differentiable here (the
    /// forward value is still returned).
    pub degenerate: bool,
}

/// Signed SVD `M = U diag(σ) Vᵀ` with `det(U Vᵀ) = +1`; the last singular
/// value absorbs the sign.
struct SignedSvd {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: [f64; 3],
}

fn signed_svd(m: &Matrix3<f64>) -> SignedSvd {
    let svd = SVD::new(*m, true, true);
    let mut u = svd.u.expect("requested U");
    let mut v = svd.v_t.expect("requested Vᵀ").transpose();
    let mut s = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    // Sort descending so the sign correction lands on the smallest value.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (u0, v0, s0) = (u, v, s);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u0.column(src));
        v.set_column(dst, &v0.column(src));
        s[dst] = s0[src];
    }
    if (u * v.transpose()).determinant() < 0.0 {
        u.set_column(2, &(-u.column(2)));
        s[2] = -s[2];
    }
    SignedSvd { u, v, sigma: s }
}

/// Nearest rotation in Frobenius norm: `U diag(1, 1, det(UVᵀ)) Vᵀ`.
pub fn so3_project(m: &Matrix3<f64>) -> Projection {
    let svd = signed_svd(m);
    let rotation = svd.u * svd.v.transpose();
    let scale = svd.sigma[0].abs().max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let [a, b, c] = svd.sigma;
    let degenerate = c.abs() <= tol || (a + b).abs() <= tol || (a + c).abs() <= tol || (b + c).abs() <= tol;
    Projection { rotation, degenerate }
}

/// Gradient of `L(so3_project(M))` with respect to `M` given `G = ∂L/∂R`.
///
/// With the signed SVD, `dR = U K Vᵀ` where `K_ij = (A_ij − A_ji)/(σ_i + σ_j)`
/// and `A = Uᵀ dM V`, hence `∂L/∂M = U [(H − Hᵀ) ⊘ (σ_i + σ_j)] Vᵀ` with
/// `H = Uᵀ G V`. Entries with `σ_i + σ_j ≈ 0` are zeroed.
pub fn so3_project_backward(m: &Matrix3<f64>, grad: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = signed_svd(m);
    let h = svd.u.transpose() * grad * svd.v;
    let scale = svd.sigma[0].abs().max(f64::MIN_POSITIVE);
    let mut inner = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let denom = svd.sigma[i] + svd.sigma[j];
            if denom.abs() > 1e-12 * scale {
                inner[(i, j)] = (h[(i, j)] - h[(j, i)]) / denom;
            }
        }
    }
    svd.u * inner * svd.v.transpose()
}

pub(crate) fn mat_from_row(row: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&row[..9])
}

pub(crate) fn mat_to_row(m: &Matrix3<f64>, out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
}

struct So3ProjectRows;

impl Backward for So3ProjectRows {
    fn name(&self) -> &'static str {
        "so3_project"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut d = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let g = so3_project_backward(&mat_from_row(x.row(r)), &mat_from_row(grad.row(r)));
            mat_to_row(&g, &mut d[r * 9..r * 9 + 9]);
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

impl Tape {
    /// Projects each row of a `J×9` tensor (a row-major 3×3 matrix) onto
    /// SO(3). Returns the projected rows and the number of degenerate rows.
    pub fn so3_project_rows(&self, x: Var) -> Result<(Var, usize)> {
        let (out, degenerate) = {
            let t = self.value(x);
            if t.cols() != 9 {
                return Err(Error::shape("so3_project", format!("expected J×9, got {:?}", t.shape())));
            }
            let mut d = vec![0.0; t.len()];
            let mut degenerate = 0;
            for r in 0..t.rows() {
                let p = so3_project(&mat_from_row(t.row(r)));
                degenerate += usize::from(p.degenerate);
                mat_to_row(&p.rotation, &mut d[r * 9..r * 9 + 9]);
            }
            (Tensor::new(t.shape().to_vec(), d)?, degenerate)
        };
        Ok((self.push(out, &[x], So3ProjectRows), degenerate))
    }
}

/// `‖RᵀR − I‖∞` (max-abs entry).
pub fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_axis_angle_is_identity() {
        assert_eq!(rodrigues(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn half_turn_about_z() {
        let r = rodrigues(&Vector3::new(0.0, 0.0, PI));
        let expect = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!((r - expect).abs().max() < 1e-15);
    }

    #[test]
    fn axis_angle_round_trip() {
        for aa in [
            Vector3::new(0.3, -0.2, 0.1),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(1e-10, 0.0, 0.0),
            Vector3::new(PI - 1e-6, 0.0, 0.0),
        ] {
            let back = axis_angle(&rodrigues(&aa));
            assert!((back - aa).norm() < 1e-8, "{aa:?} -> {back:?}");
        }
    }

    #[test]
    fn projection_of_rotation_is_identity_map() {
        let r = rodrigues(&Vector3::new(0.4, -1.1, 0.7));
        let p = so3_project(&r);
        assert!((p.rotation - r).abs().max() < 1e-12);
        assert!(!p.degenerate);
    }

    #[test]
    fn scaled_rotation_projects_to_rotation() {
        let r = rodrigues(&Vector3::new(-0.9, 0.2, 1.4));
        let p = so3_project(&(2.0 * r));
        assert!((p.rotation - r).abs().max() < 1e-12);
        assert!(!p.degenerate);
    }

    #[test]
    fn reflection_input_gives_proper_rotation() {
        let r1 = rodrigues(&Vector3::new(0.3, 0.5, -0.2));
        let r2 = rodrigues(&Vector3::new(-1.0, 0.1, 0.4));
        let m = r1 * Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0)) * r2.transpose();
        let p = so3_project(&m);
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!(orthogonality_error(&p.rotation) < 1e-12);
    }

    #[test]
    fn zero_matrix_is_flagged() {
        assert!(so3_project(&Matrix3::zeros()).degenerate);
    }
}
