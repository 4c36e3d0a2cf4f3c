//! Joint regression, weak-perspective projection, training losses and
//! evaluation metrics.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3, SVD};
use serde::Serialize;

use crate::bodymodel::{BodyParams, MiniBodyModel};
use crate::diffcore::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::meshgraph::SparseMatrix;

/// Weak-perspective camera: `x ↦ s·(x, y) + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CameraParams {
    pub s: f64,
    pub t: [f64; 2],
}

impl CameraParams {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !t.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("camera scale must be positive and finite, got {s}")));
        }
        Ok(CameraParams { s, t })
    }

    /// `[s, tx, ty]` as a `1×3` tensor, the layout [`Tape::project`] expects.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 3], vec![self.s, self.t[0], self.t[1]]).unwrap()
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [s, tx, ty] => CameraParams::new(*s, [*tx, *ty]),
            _ => Err(Error::shape("camera", format!("expected 3 values, got {}", v.len()))),
        }
    }
}

/// 2-D keypoints in normalized image units with per-point visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Keypoints2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.points.len(), 2], self.points.iter().flatten().copied().collect()).unwrap()
    }

    /// Points inside the image square `[−1, 1]²` are visible.
    pub fn from_points(points: Vec<[f64; 2]>) -> Self {
        let visible = points.iter().map(|p| p[0].abs() <= 1.0 && p[1].abs() <= 1.0).collect();
        Keypoints2D { points, visible }
    }
}

/// Joints regressed from flat `N×3` vertices.
pub fn regress_joints(reg: &SparseMatrix, vertices: &[f64]) -> Result<Vec<f64>> {
    crate::meshgraph::sparse_dense_multiply(reg, vertices, vertices.len() / 3, 3)
}

/// Projects flat `J×3` joints with the camera.
pub fn project_points(joints: &[f64], cam: &CameraParams) -> Vec<[f64; 2]> {
    joints
        .chunks_exact(3)
        .map(|p| [cam.s * p[0] + cam.t[0], cam.s * p[1] + cam.t[1]])
        .collect()
}

struct Project;

impl Backward for Project {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (joints, cam) = (inputs[0], inputs[1]);
        let s = cam.data()[0];
        let g = grad.data();
        let d_joints = needs[0].then(|| {
            let mut d = vec![0.0; joints.len()];
            for r in 0..joints.rows() {
                d[r * 3] = s * g[r * 2];
                d[r * 3 + 1] = s * g[r * 2 + 1];
            }
            Tensor::new(joints.shape().to_vec(), d).unwrap()
        });
        let d_cam = needs[1].then(|| {
            let (mut ds, mut dx, mut dy) = (0.0, 0.0, 0.0);
            for r in 0..joints.rows() {
                let p = joints.row(r);
                ds += g[r * 2] * p[0] + g[r * 2 + 1] * p[1];
                dx += g[r * 2];
                dy += g[r * 2 + 1];
            }
            Tensor::new(cam.shape().to_vec(), vec![ds, dx, dy]).unwrap()
        });
        vec![d_joints, d_cam]
    }
}

impl Tape {
    /// Joints `reg · vertices`.
    pub fn regress_joints(&self, reg: &Arc<SparseMatrix>, vertices: Var) -> Result<Var> {
        self.sparse_matmul(reg, vertices)
    }

    /// Weak-perspective projection of `J×3` joints with a `1×3` camera
    /// `[s, tx, ty]`, giving `J×2`.
    pub fn project(&self, joints: Var, cam: Var) -> Result<Var> {
        let out = {
            let (tj, tc) = (self.value(joints), self.value(cam));
            if tj.cols() != 3 || tc.len() != 3 {
                return Err(Error::shape(
                    "project",
                    format!("joints {:?}, camera {:?}", tj.shape(), tc.shape()),
                ));
            }
            let cam = tc.data();
            let mut d = Vec::with_capacity(tj.rows() * 2);
            for r in 0..tj.rows() {
                let p = tj.row(r);
                d.push(cam[0] * p[0] + cam[1]);
                d.push(cam[0] * p[1] + cam[2]);
            }
            Tensor::new([tj.rows(), 2], d)?
        };
        Ok(self.push(out, &[joints, cam], Project))
    }

    /// `Σᵢ ‖Ŷᵢ − Yᵢ‖₁` over mesh vertices.
    pub fn loss_shape(&self, pred: Var, gt: &Tensor) -> Result<Var> {
        self.l1_loss(pred, gt)
    }

    /// `Σᵢ ‖X̂ᵢ − Xᵢ‖₁` over visible keypoints.
    pub fn loss_joints(&self, pred2d: Var, gt: &Keypoints2D) -> Result<Var> {
        self.l1_loss_masked(pred2d, &gt.to_tensor(), Some(&gt.visible))
    }
}

/// Individual terms of the mesh-stage objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub shape: Option<Var>,
    pub joints: Var,
}

/// Mesh-stage objective: `L_shape + L_J`, or `L_J` alone for weak samples.
///
/// A missing ground-truth mesh is an error unless `weak_only` is set.
pub fn total_loss(
    tape: &Tape,
    reg: &Arc<SparseMatrix>,
    mesh: Var,
    cam: Var,
    gt_mesh: Option<&Tensor>,
    gt_keypoints: &Keypoints2D,
    weak_only: bool,
) -> Result<LossTerms> {
    let joints = tape.regress_joints(reg, mesh)?;
    let projected = tape.project(joints, cam)?;
    let l_joints = tape.loss_joints(projected, gt_keypoints)?;
    if weak_only {
        return Ok(LossTerms { total: l_joints, shape: None, joints: l_joints });
    }
    let gt = gt_mesh.ok_or_else(|| Error::MissingLabel("ground-truth mesh required for the shape loss".into()))?;
    let l_shape = tape.loss_shape(mesh, gt)?;
    let total = tape.add(l_shape, l_joints)?;
    Ok(LossTerms { total, shape: Some(l_shape), joints: l_joints })
}

/// Weight of the shape-coefficient term of the parameter-stage objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_beta: 0.1 }
    }
}

impl LossWeights {
    pub fn new(lambda_beta: f64) -> Result<Self> {
        if !(lambda_beta >= 0.0) || !lambda_beta.is_finite() {
            return Err(Error::Config(format!("lambda_beta must be finite and non-negative, got {lambda_beta}")));
        }
        Ok(LossWeights { lambda_beta })
    }
}

/// Predicted body parameters on the tape: `J×9` rotation rows and `1×B` shape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub rotations: Var,
    pub beta: Var,
}

/// Ground truth for the parameter stage.
pub struct ParamTarget<'a> {
    pub params: &'a BodyParams,
    pub mesh: &'a Tensor,
    pub keypoints: &'a Keypoints2D,
}

/// Terms of the parameter-stage objective.
#[derive(Debug, Clone, Copy)]
pub struct ParamLossTerms {
    pub total: Var,
    pub shape: Var,
    pub joints: Var,
    pub theta: Var,
    pub beta: Var,
}

/// `L_shape(lbs(θ̂, β̂)) + L_J + L2(θ̂, θ) + λ·L2(β̂, β)`, rotations compared
/// as matrices.
pub fn smpl_stage_loss(
    tape: &Tape,
    model: &Arc<MiniBodyModel>,
    pred: ParamVars,
    cam: Var,
    target: &ParamTarget<'_>,
    weights: LossWeights,
) -> Result<ParamLossTerms> {
    if !target.params.is_matrix_form() {
        return Err(Error::Representation("ground-truth pose must be in rotation-matrix form".into()));
    }
    if tape.shape(pred.rotations).get(1) != Some(&9) {
        return Err(Error::Representation(format!(
            "predicted pose must be J×9 rotation rows, got {:?}",
            tape.shape(pred.rotations)
        )));
    }
    let mesh = tape.lbs(model, pred.rotations, pred.beta)?;
    let joints_reg = model.joint_regressor();
    let l_shape = tape.loss_shape(mesh, target.mesh)?;
    let joints = tape.regress_joints(joints_reg, mesh)?;
    let projected = tape.project(joints, cam)?;
    let l_joints = tape.loss_joints(projected, target.keypoints)?;
    let l_theta = tape.l2_loss(pred.rotations, &target.params.rotation_rows())?;
    let l_beta = tape.l2_loss(pred.beta, &target.params.beta_row())?;
    let weighted = tape.scale(l_beta, weights.lambda_beta);
    let total = tape.add(l_shape, l_joints)?;
    let total = tape.add(total, l_theta)?;
    let total = tape.add(total, weighted)?;
    Ok(ParamLossTerms { total, shape: l_shape, joints: l_joints, theta: l_theta, beta: l_beta })
}

fn points(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

/// Mean Euclidean distance between corresponding points, no alignment.
pub fn mean_point_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() || pred.len() % 3 != 0 {
        return Err(Error::shape("mean_point_error", format!("{} vs {} values", pred.len(), gt.len())));
    }
    let (p, g) = (points(pred), points(gt));
    Ok(p.iter().zip(&g).map(|(a, b)| (a - b).norm()).sum::<f64>() / p.len() as f64)
}

/// Mean per-joint position error after moving joint 0 of each set to the origin.
pub fn mpjpe(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() < 3 || pred.len() % 3 != 0 {
        return Err(Error::shape("mpjpe", format!("{} vs {} values", pred.len(), gt.len())));
    }
    let (p, g) = (points(pred), points(gt));
    let (p0, g0) = (p[0], g[0]);
    Ok(p.iter().zip(&g).map(|(a, b)| ((a - p0) - (b - g0)).norm()).sum::<f64>() / p.len() as f64)
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub s: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.s * (self.r * p) + self.t
    }
}

/// Least-squares similarity aligning `pred` onto `gt` (reflections excluded)
/// and the mean per-point distance after alignment.
pub fn procrustes_align(pred: &[f64], gt: &[f64]) -> Result<(Similarity, f64)> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 {
        return Err(Error::shape("procrustes_align", format!("{} vs {} values", pred.len(), gt.len())));
    }
    let (p, g) = (points(pred), points(gt));
    let n = p.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {n}")));
    }
    let mu_p = p.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_g = g.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(&g) {
        let (pc, gc) = (a - mu_p, b - mu_g);
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    cov /= n as f64;
    var_p /= n as f64;
    let svd = SVD::new(cov, true, true);
    let sv = svd.singular_values;
    let top = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Rank 2 (planar points) still has a unique optimum; rank ≤ 1 does not.
    if !(top > 0.0) || sorted[1] <= 1e-12 * top || var_p <= f64::MIN_POSITIVE {
        return Err(Error::Degenerate("covariance of the point sets is rank-deficient".into()));
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // Flip the direction of the smallest singular value.
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * v_t;
    let s = (Matrix3::from_diagonal(&sv) * d).trace() / var_p;
    let t = mu_g - s * (r * mu_p);
    let sim = Similarity { s, r, t };
    let err = p.iter().zip(&g).map(|(a, b)| (sim.apply(a) - b).norm()).sum::<f64>() / n as f64;
    Ok((sim, err))
}

/// Procrustes-aligned mean joint error.
pub fn reconstruction_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    procrustes_align(pred, gt).map(|(_, e)| e)
}

/// Mean over vertices of the per-vertex L1 distance.
pub fn per_vertex_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() || pred.len() % 3 != 0 {
        return Err(Error::shape("per_vertex_error", format!("{} vs {} values", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / (pred.len() / 3) as f64)
}

/// Mean Euclidean distance over visible keypoints (0 when none are visible).
pub fn keypoint_error(pred: &[[f64; 2]], gt: &Keypoints2D) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, g), &vis) in pred.iter().zip(&gt.points).zip(&gt.visible) {
        if vis {
            total += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per-sample errors of one mesh prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleErrors {
    pub mpjpe: f64,
    pub reconstruction_error: f64,
    pub per_vertex_error: f64,
}

impl SampleErrors {
    /// Errors of a predicted mesh against the ground truth, joints taken
    /// through `reg`.
    pub fn of_mesh(reg: &SparseMatrix, pred: &[f64], gt: &[f64]) -> Result<Self> {
        let (jp, jg) = (regress_joints(reg, pred)?, regress_joints(reg, gt)?);
        Ok(SampleErrors {
            mpjpe: mpjpe(&jp, &jg)?,
            reconstruction_error: reconstruction_error(&jp, &jg)?,
            per_vertex_error: per_vertex_error(pred, gt)?,
        })
    }
}

/// Averages of evaluation metrics over a split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub mpjpe: f64,
    pub reconstruction_error: f64,
    pub per_vertex_error: f64,
    /// Over all samples, including those without a ground-truth mesh.
    pub keypoint_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parametric: Option<SampleErrors>,
    /// Samples whose reconstruction error exceeded their MPJPE.
    pub alignment_violations: usize,
}

impl MetricsReport {
    /// Averages per-sample errors; `keypoint` holds one value per evaluated sample.
    pub fn from_samples(mesh: &[SampleErrors], keypoint: &[f64], parametric: Option<&[SampleErrors]>) -> Self {
        let mean = |v: &[SampleErrors]| {
            let n = v.len().max(1) as f64;
            SampleErrors {
                mpjpe: v.iter().map(|e| e.mpjpe).sum::<f64>() / n,
                reconstruction_error: v.iter().map(|e| e.reconstruction_error).sum::<f64>() / n,
                per_vertex_error: v.iter().map(|e| e.per_vertex_error).sum::<f64>() / n,
            }
        };
        let m = mean(mesh);
        MetricsReport {
            samples: keypoint.len(),
            mpjpe: m.mpjpe,
            reconstruction_error: m.reconstruction_error,
            per_vertex_error: m.per_vertex_error,
            keypoint_error: keypoint.iter().sum::<f64>() / keypoint.len().max(1) as f64,
            parametric: parametric.map(mean),
            alignment_violations: mesh.iter().filter(|e| e.reconstruction_error > e.mpjpe).count(),
        }
    }

    /// One `key=value` per line.
    pub fn to_key_values(&self) -> String {
        let mut out = format!(
            "samples={}\nmpjpe={}\nreconstruction_error={}\nper_vertex_error={}\nkeypoint_error={}\nalignment_violations={}\n",
            self.samples,
            self.mpjpe,
            self.reconstruction_error,
            self.per_vertex_error,
            self.keypoint_error,
            self.alignment_violations
        );
        if let Some(p) = &self.parametric {
            out += &format!(
                "parametric_mpjpe={}\nparametric_reconstruction_error={}\nparametric_per_vertex_error={}\n",
                p.mpjpe, p.reconstruction_error, p.per_vertex_error
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_examples() {
        let tape = Tape::new();
        let j = tape.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let c1 = tape.constant(CameraParams::new(1.0, [0.0, 0.0]).unwrap().to_tensor());
        let c2 = tape.constant(CameraParams::new(2.0, [1.0, -1.0]).unwrap().to_tensor());
        assert_eq!(tape.value(tape.project(j, c1).unwrap()).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(tape.project(j, c2).unwrap()).data(), &[3.0, 3.0]);
    }

    #[test]
    fn camera_scale_must_be_positive() {
        assert!(CameraParams::new(0.0, [0.0, 0.0]).is_err());
        assert!(CameraParams::new(f64::NAN, [0.0, 0.0]).is_err());
    }

    #[test]
    fn mpjpe_examples() {
        let gt = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 5.0).collect();
        assert_eq!(mpjpe(&shifted, &gt).unwrap(), 0.0);
        let pred = [0.0, 0.0, 0.0, 4.0, 5.0, 1.0];
        assert!((mpjpe(&pred, &gt).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn procrustes_identity() {
        let p = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let (sim, err) = procrustes_align(&p, &p).unwrap();
        assert!((sim.s - 1.0).abs() < 1e-12);
        assert!((sim.r - Matrix3::identity()).abs().max() < 1e-12);
        assert!(sim.t.norm() < 1e-12);
        assert!(err < 1e-12);
    }

    #[test]
    fn procrustes_rejects_collinear() {
        let p = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        assert!(matches!(procrustes_align(&p, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weak_only_ignores_mesh() {
        let reg = Arc::new(SparseMatrix::identity(2));
        let tape = Tape::new();
        let mesh = tape.constant(Tensor::new([2, 3], vec![0.1, 0.2, 9.0, -0.3, 0.4, 9.0]).unwrap());
        let cam = tape.constant(CameraParams::new(1.0, [0.0, 0.0]).unwrap().to_tensor());
        let kp = Keypoints2D::from_points(vec![[0.1, 0.2], [-0.3, 0.4]]);
        let wrong = Tensor::zeros([2, 3]);
        let weak = total_loss(&tape, &reg, mesh, cam, Some(&wrong), &kp, true).unwrap();
        assert_eq!(tape.value(weak.total).item(), 0.0);
        assert!(matches!(total_loss(&tape, &reg, mesh, cam, None, &kp, false), Err(Error::MissingLabel(_))));
        let strong = total_loss(&tape, &reg, mesh, cam, Some(&wrong), &kp, false).unwrap();
        let expect = 0.1 + 0.2 + 9.0 + 0.3 + 0.4 + 9.0;
        assert!((tape.value(strong.total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn invisible_keypoints_contribute_nothing() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new([2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap());
        let kp = Keypoints2D { points: vec![[0.0, 0.0]; 2], visible: vec![false, false] };
        assert_eq!(tape.value(tape.loss_joints(p, &kp).unwrap()).item(), 0.0);
        assert_eq!(keypoint_error(&[[1.0, 1.0], [2.0, 2.0]], &kp), 0.0);
    }

    #[test]
    fn report_formats() {
        let e = SampleErrors { mpjpe: 0.5, reconstruction_error: 0.25, per_vertex_error: 0.125 };
        let r = MetricsReport::from_samples(&[e, e], &[0.1, 0.3], None);
        let kv = r.to_key_values();
        assert!(kv.contains("mpjpe=0.5\n"));
        assert!(kv.contains("keypoint_error=0.2"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["per_vertex_error"], 0.125);
    }
}
