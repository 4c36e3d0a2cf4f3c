use nalgebra::{Matrix3, Vector3};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::rotation::{axis_angle, mat_from_row, mat_to_row, orthogonality_error, rodrigues};

/// Per-joint pose in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Pose {
    AxisAngle(Vec<Vector3<f64>>),
    Matrices(Vec<Matrix3<f64>>),
}

/// Pose `θ` (one rotation per joint, root first) and shape coefficients `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub pose: Pose,
    pub beta: Vec<f64>,
}

impl BodyParams {
    pub fn identity(joints: usize, betas: usize) -> Self {
        BodyParams { pose: Pose::Matrices(vec![Matrix3::identity(); joints]), beta: vec![0.0; betas] }
    }

    pub fn num_joints(&self) -> usize {
        match &self.pose {
            Pose::AxisAngle(v) => v.len(),
            Pose::Matrices(v) => v.len(),
        }
    }

    pub fn is_matrix_form(&self) -> bool {
        matches!(self.pose, Pose::Matrices(_))
    }

    /// Rotation matrices, converting through Rodrigues when needed.
    pub fn rotations(&self) -> Vec<Matrix3<f64>> {
        match &self.pose {
            Pose::AxisAngle(v) => v.iter().map(rodrigues).collect(),
            Pose::Matrices(v) => v.clone(),
        }
    }

    pub fn axis_angles(&self) -> Vec<Vector3<f64>> {
        match &self.pose {
            Pose::AxisAngle(v) => v.clone(),
            Pose::Matrices(v) => v.iter().map(axis_angle).collect(),
        }
    }

    pub fn to_matrix_form(&self) -> BodyParams {
        BodyParams { pose: Pose::Matrices(self.rotations()), beta: self.beta.clone() }
    }

    /// Rotations as a `J×9` tensor of row-major matrices.
    pub fn rotation_rows(&self) -> Tensor {
        let rots = self.rotations();
        let mut d = vec![0.0; rots.len() * 9];
        for (j, r) in rots.iter().enumerate() {
            mat_to_row(r, &mut d[j * 9..j * 9 + 9]);
        }
        Tensor::new([rots.len(), 9], d).unwrap()
    }

    pub fn beta_row(&self) -> Tensor {
        Tensor::new([1, self.beta.len()], self.beta.clone()).unwrap()
    }

    pub fn from_rotation_rows(rows: &Tensor, beta: Vec<f64>) -> Result<Self> {
        if rows.cols() != 9 {
            return Err(Error::shape("from_rotation_rows", format!("{:?}", rows.shape())));
        }
        let mats = (0..rows.rows()).map(|r| mat_from_row(rows.row(r))).collect();
        Ok(BodyParams { pose: Pose::Matrices(mats), beta })
    }

    /// Checks that every matrix is a proper rotation to within `tol`.
    pub fn check_so3(&self, tol: f64) -> Result<()> {
        for (j, r) in self.rotations().iter().enumerate() {
            let det = r.determinant();
            if orthogonality_error(r) >= tol || (det - 1.0).abs() > tol {
                return Err(Error::Degenerate(format!("joint {j} rotation is not in SO(3)")));
            }
        }
        Ok(())
    }
}
