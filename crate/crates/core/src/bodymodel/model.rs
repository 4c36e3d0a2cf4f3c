//! Skinned parametric body model: shape blendshapes, a joint regressor, a
//! kinematic tree and linear blend skinning.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::container::Container;
use crate::diffcore::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::meshgraph::{sparse_dense_multiply, SparseMatrix, TemplateMesh};

use super::params::BodyParams;
use super::rotation::mat_from_row;

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBodyModel {
    template: TemplateMesh,
    /// `N×3×B`, index `(i * 3 + k) * B + b`.
    shape_dirs: Vec<f64>,
    num_betas: usize,
    joint_regressor: Arc<SparseMatrix>,
    parents: Vec<Option<usize>>,
    /// `N×J`, rows sum to one.
    skin_weights: Vec<f64>,
}

impl MiniBodyModel {
    pub fn new(
        template: TemplateMesh,
        shape_dirs: Vec<f64>,
        num_betas: usize,
        joint_regressor: SparseMatrix,
        parents: Vec<Option<usize>>,
        skin_weights: Vec<f64>,
    ) -> Result<Self> {
        let n = template.num_vertices();
        let j = parents.len();
        if j == 0 || parents[0].is_some() {
            return Err(Error::InvalidMesh("joint 0 must be the root".into()));
        }
        for (k, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => {
                    return Err(Error::InvalidMesh(format!(
                        "joint {k} must have a parent with a smaller index"
                    )))
                }
            }
        }
        if shape_dirs.len() != n * 3 * num_betas {
            return Err(Error::shape("body model", "shape_dirs must be N×3×B"));
        }
        if joint_regressor.rows() != j || joint_regressor.cols() != n {
            return Err(Error::shape("body model", "joint regressor must be J×N"));
        }
        for (r, s) in joint_regressor.row_sums().iter().enumerate() {
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidMesh(format!("joint regressor row {r} sums to {s}")));
            }
        }
        if skin_weights.len() != n * j {
            return Err(Error::shape("body model", "skin weights must be N×J"));
        }
        for (i, row) in skin_weights.chunks_exact(j).enumerate() {
            if row.iter().any(|&w| w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidMesh(format!("skin weights of vertex {i} are not a partition of unity")));
            }
        }
        Ok(MiniBodyModel {
            template,
            shape_dirs,
            num_betas,
            joint_regressor: Arc::new(joint_regressor),
            parents,
            skin_weights,
        })
    }

    pub fn template(&self) -> &TemplateMesh {
        &self.template
    }

    pub fn num_vertices(&self) -> usize {
        self.template.num_vertices()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_betas(&self) -> usize {
        self.num_betas
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn joint_regressor(&self) -> &Arc<SparseMatrix> {
        &self.joint_regressor
    }

    pub fn skin_weights(&self) -> &[f64] {
        &self.skin_weights
    }

    pub fn shape_dirs(&self) -> &[f64] {
        &self.shape_dirs
    }

    /// Joint with the largest skinning weight for each vertex.
    pub fn part_labels(&self) -> Vec<usize> {
        let j = self.num_joints();
        self.skin_weights
            .chunks_exact(j)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &w)| if w > best.1 { (k, w) } else { best })
                    .0
            })
            .collect()
    }

    fn shaped_template(&self, beta: &[f64]) -> Vec<f64> {
        let b = self.num_betas;
        let mut out = self.template.flat_vertices();
        for (idx, v) in out.iter_mut().enumerate() {
            let dirs = &self.shape_dirs[idx * b..(idx + 1) * b];
            *v += dirs.iter().zip(beta).map(|(d, c)| d * c).sum::<f64>();
        }
        out
    }

    /// Rest joints of the shaped template (`J×3`, flat).
    pub fn rest_joints(&self, beta: &[f64]) -> Vec<f64> {
        let shaped = self.shaped_template(beta);
        sparse_dense_multiply(&self.joint_regressor, &shaped, self.num_vertices(), 3)
            .expect("regressor matches template")
    }

    fn check_params(&self, rotations: usize, betas: usize) -> Result<()> {
        if rotations != self.num_joints() || betas != self.num_betas {
            return Err(Error::shape(
                "lbs_forward",
                format!(
                    "model has {} joints / {} betas, params have {rotations} / {betas}",
                    self.num_joints(),
                    self.num_betas
                ),
            ));
        }
        Ok(())
    }

    fn posed(&self, rotations: &[Matrix3<f64>], beta: &[f64]) -> Posed {
        let n = self.num_vertices();
        let j = self.num_joints();
        let shaped = self.shaped_template(beta);
        let rest = sparse_dense_multiply(&self.joint_regressor, &shaped, n, 3).unwrap();
        let rest: Vec<Vector3<f64>> = rest.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        // World transform of joint k is x ↦ W_k x + t_k, composed from local
        // rotations about the rest joints: W_k = W_p R_k, t_k = W_p (r_k − R_k r_k) + t_p.
        let mut world_rot: Vec<Matrix3<f64>> = Vec::with_capacity(j);
        let mut world_shift: Vec<Vector3<f64>> = Vec::with_capacity(j);
        for k in 0..j {
            let local = rest[k] - rotations[k] * rest[k];
            match self.parents[k] {
                None => {
                    world_rot.push(rotations[k]);
                    world_shift.push(local);
                }
                Some(p) => {
                    let wp = world_rot[p];
                    let tp = world_shift[p];
                    world_rot.push(wp * rotations[k]);
                    world_shift.push(wp * local + tp);
                }
            }
        }
        // Displacement form keeps the rest pose exact: v = x + Σ w ((W − I) x + t).
        let eye = Matrix3::identity();
        let mut vertices = shaped.clone();
        for i in 0..n {
            let w = &self.skin_weights[i * j..(i + 1) * j];
            let mut m = Matrix3::zeros();
            let mut t = Vector3::zeros();
            for k in 0..j {
                if w[k] != 0.0 {
                    m += w[k] * (world_rot[k] - eye);
                    t += w[k] * world_shift[k];
                }
            }
            let x = Vector3::new(shaped[i * 3], shaped[i * 3 + 1], shaped[i * 3 + 2]);
            let d = m * x + t;
            for c in 0..3 {
                vertices[i * 3 + c] += d[c];
            }
        }
        Posed { shaped, rest, world_rot, vertices }
    }

    /// Posed and shaped vertices (`N×3`, flat).
    pub fn lbs_forward(&self, params: &BodyParams) -> Result<Vec<f64>> {
        let rotations = params.rotations();
        self.check_params(rotations.len(), params.beta.len())?;
        Ok(self.posed(&rotations, &params.beta).vertices)
    }

    /// Joint locations of a posed mesh through the joint regressor.
    pub fn regress_joints(&self, vertices: &[f64]) -> Result<Vec<f64>> {
        sparse_dense_multiply(&self.joint_regressor, vertices, self.num_vertices(), 3)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let n = self.num_vertices();
        let j = self.num_joints();
        c.put_f64("template/vertices", vec![n, 3], self.template.flat_vertices()).unwrap();
        let faces: Vec<i64> = self.template.faces().iter().flatten().map(|&i| i as i64).collect();
        c.put_i64("template/faces", vec![self.template.num_faces(), 3], faces).unwrap();
        c.put_f64("shape_dirs", vec![n, 3, self.num_betas], self.shape_dirs.clone()).unwrap();
        c.put_sparse("joint_regressor", &self.joint_regressor);
        let parents: Vec<i64> = self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect();
        c.put_i64("parents", vec![j], parents).unwrap();
        c.put_f64("skin_weights", vec![n, j], self.skin_weights.clone()).unwrap();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let verts = c.tensor("template/vertices")?;
        let faces = c.usizes("template/faces")?;
        let template = TemplateMesh::new(
            verts.data().chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect(),
            faces.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect(),
        )?;
        let dirs = c.tensor("shape_dirs")?;
        let num_betas = *dirs.shape().last().unwrap_or(&0);
        let parents = c
            .i64s("parents")?
            .1
            .into_iter()
            .map(|p| usize::try_from(p).ok())
            .collect();
        MiniBodyModel::new(
            template,
            dirs.into_data(),
            num_betas,
            c.sparse("joint_regressor")?,
            parents,
            c.tensor("skin_weights")?.into_data(),
        )
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

struct Posed {
    shaped: Vec<f64>,
    rest: Vec<Vector3<f64>>,
    world_rot: Vec<Matrix3<f64>>,
    vertices: Vec<f64>,
}

struct LbsOp {
    model: Arc<MiniBodyModel>,
}

impl Backward for LbsOp {
    fn name(&self) -> &'static str {
        "lbs"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let model = &self.model;
        let (n, j, nb) = (model.num_vertices(), model.num_joints(), model.num_betas);
        let rotations: Vec<Matrix3<f64>> = (0..j).map(|k| mat_from_row(inputs[0].row(k))).collect();
        let beta = inputs[1].data();
        let posed = model.posed(&rotations, beta);
        let g = grad.data();

        let eye = Matrix3::identity();
        let mut g_w = vec![Matrix3::zeros(); j];
        let mut g_t = vec![Vector3::zeros(); j];
        let mut g_shaped = vec![0.0; n * 3];
        for i in 0..n {
            let w = &model.skin_weights[i * j..(i + 1) * j];
            let gv = Vector3::new(g[i * 3], g[i * 3 + 1], g[i * 3 + 2]);
            let x = Vector3::new(posed.shaped[i * 3], posed.shaped[i * 3 + 1], posed.shaped[i * 3 + 2]);
            let outer = gv * x.transpose();
            let mut m = eye;
            for k in 0..j {
                if w[k] != 0.0 {
                    g_w[k] += w[k] * outer;
                    g_t[k] += w[k] * gv;
                    m += w[k] * (posed.world_rot[k] - eye);
                }
            }
            let gx = m.transpose() * gv;
            g_shaped[i * 3..i * 3 + 3].copy_from_slice(gx.as_slice());
        }
        // Reverse the kinematic chain; children have larger indices.
        let mut g_rot = vec![Matrix3::zeros(); j];
        let mut g_rest = vec![Vector3::zeros(); j];
        for k in (0..j).rev() {
            let (wp, r) = match model.parents[k] {
                None => (eye, rotations[k]),
                Some(p) => (posed.world_rot[p], rotations[k]),
            };
            let rk = posed.rest[k];
            let g_local = wp.transpose() * g_t[k];
            g_rot[k] += wp.transpose() * g_w[k] - g_local * rk.transpose();
            g_rest[k] += g_local - r.transpose() * g_local;
            if let Some(p) = model.parents[k] {
                let local = rk - r * rk;
                let (gwk, gtk) = (g_w[k], g_t[k]);
                g_w[p] += gwk * r.transpose() + gtk * local.transpose();
                g_t[p] += gtk;
            }
        }
        let d_rot = needs[0].then(|| {
            let mut d = vec![0.0; j * 9];
            for k in 0..j {
                super::rotation::mat_to_row(&g_rot[k], &mut d[k * 9..k * 9 + 9]);
            }
            Tensor::new(inputs[0].shape().to_vec(), d).unwrap()
        });
        let d_beta = needs[1].then(|| {
            let rest_flat: Vec<f64> = g_rest.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            let via_joints = crate::meshgraph::sparse_transpose_dense_multiply(
                &model.joint_regressor,
                &rest_flat,
                j,
                3,
            )
            .unwrap();
            let mut d = vec![0.0; nb];
            for idx in 0..n * 3 {
                let gs = g_shaped[idx] + via_joints[idx];
                for (b, acc) in d.iter_mut().enumerate() {
                    *acc += gs * model.shape_dirs[idx * nb + b];
                }
            }
            Tensor::new(inputs[1].shape().to_vec(), d).unwrap()
        });
        vec![d_rot, d_beta]
    }
}

impl Tape {
    /// Differentiable skinning: `rotations` is `J×9` (row-major matrices),
    /// `beta` holds `B` values. Output is `N×3`.
    pub fn lbs(&self, model: &Arc<MiniBodyModel>, rotations: Var, beta: Var) -> Result<Var> {
        let out = {
            let (tr, tb) = (self.value(rotations), self.value(beta));
            if tr.cols() != 9 {
                return Err(Error::shape("lbs", format!("rotations must be J×9, got {:?}", tr.shape())));
            }
            model.check_params(tr.rows(), tb.len())?;
            let rots: Vec<Matrix3<f64>> = (0..tr.rows()).map(|k| mat_from_row(tr.row(k))).collect();
            Tensor::new([model.num_vertices(), 3], model.posed(&rots, tb.data()).vertices)?
        };
        Ok(self.push(out, &[rotations, beta], LbsOp { model: Arc::clone(model) }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{make_mini_model, rodrigues, Pose};
    use crate::diffcore::{grad_check, DEFAULT_STEP};

    fn small() -> MiniBodyModel {
        make_mini_model(7, 162, 8, 3).unwrap()
    }

    #[test]
    fn zero_params_reproduce_template() {
        let m = small();
        let v = m.lbs_forward(&BodyParams::identity(8, 3)).unwrap();
        assert_eq!(v, m.template().flat_vertices());
    }

    #[test]
    fn root_rotation_is_rigid_about_root_joint() {
        let m = small();
        let r = rodrigues(&Vector3::new(0.3, -1.2, 0.5));
        let mut rots = vec![Matrix3::identity(); 8];
        rots[0] = r;
        let params = BodyParams { pose: Pose::Matrices(rots), beta: vec![0.0; 3] };
        let posed = m.lbs_forward(&params).unwrap();
        let root = m.rest_joints(&[0.0; 3]);
        let root = Vector3::new(root[0], root[1], root[2]);
        for (i, v) in m.template().vertices().iter().enumerate() {
            let expect = r * (Vector3::from(*v) - root) + root;
            for k in 0..3 {
                assert!((posed[i * 3 + k] - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_beta_adds_shape_direction() {
        let m = small();
        let mut params = BodyParams::identity(8, 3);
        params.beta[1] = 1.0;
        let v = m.lbs_forward(&params).unwrap();
        let t = m.template().flat_vertices();
        for idx in 0..t.len() {
            assert!((v[idx] - t[idx] - m.shape_dirs()[idx * 3 + 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_param_sizes_rejected() {
        let m = small();
        assert!(m.lbs_forward(&BodyParams::identity(7, 3)).is_err());
        assert!(m.lbs_forward(&BodyParams::identity(8, 2)).is_err());
    }

    #[test]
    fn container_round_trip() {
        let m = small();
        let bytes = m.to_container().to_bytes();
        let back = MiniBodyModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn lbs_gradient_matches_finite_differences() {
        let m = Arc::new(make_mini_model(1, 42, 6, 2).unwrap());
        let mut rows = vec![0.0; 6 * 9];
        for j in 0..6 {
            let r = rodrigues(&Vector3::new(0.2 * j as f64, -0.3, 0.1 + 0.05 * j as f64));
            super::super::rotation::mat_to_row(&r, &mut rows[j * 9..j * 9 + 9]);
            // Off-manifold perturbation: skinning is defined for any matrix.
            rows[j * 9 + 1] += 0.05;
        }
        let rot = Tensor::new([6, 9], rows).unwrap();
        let beta = Tensor::new([1, 2], vec![0.7, -1.1]).unwrap();
        let weights = Tensor::new(
            [m.num_vertices(), 3],
            (0..m.num_vertices() * 3).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect(),
        )
        .unwrap();
        let report = grad_check(
            |tape, v| {
                let out = tape.lbs(&m, v[0], v[1])?;
                tape.dot_const(out, &weights)
            },
            &[rot, beta],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
