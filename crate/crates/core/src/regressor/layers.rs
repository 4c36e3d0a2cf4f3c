//! Per-vertex linear layers, graph convolution, residual graph blocks and
//! the small custom ops the regressor needs.

use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::meshgraph::SparseMatrix;

use super::params::{Bound, ParamId, ParamStore};

/// `Y = X W + b`, applied to every row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weights from `N(0, gain/fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = (gain / inputs.max(1) as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), inputs, outputs, std, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, outputs]));
        Linear { w, b, inputs, outputs }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl GroupNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([1, channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([1, channels]));
        GroupNormLayer { gamma, beta, groups }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, GROUP_NORM_EPS, p.var(self.gamma), p.var(self.beta))
    }
}

/// `Y = Ã (X W) + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConvLayer {
    pub lin: Linear,
}

impl GraphConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        GraphConvLayer { lin: Linear::new(store, name, inputs, outputs, 2.0, rng) }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, adj: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        graph_conv(tape, adj, x, p.var(self.lin.w), p.var(self.lin.b))
    }
}

/// `Ã (X W) + b` with explicit tape variables.
pub fn graph_conv(tape: &Tape, adj: &Arc<SparseMatrix>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let y = tape.sparse_matmul(adj, xw)?;
    tape.add_row(y, b)
}

/// Bottleneck block `X + g(X)` with
/// `g = linear↓ → norm → relu → graph conv → norm → relu → linear↑`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphResidualBlock {
    pub down: Linear,
    pub norm1: GroupNormLayer,
    pub conv: GraphConvLayer,
    pub norm2: GroupNormLayer,
    pub up: Linear,
}

impl GraphResidualBlock {
    /// The final projection starts at zero so the block starts as the identity.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inner_groups: usize, rng: &mut impl Rng) -> Self {
        let inner = channels / 4;
        let down = Linear::new(store, &format!("{name}.down"), channels, inner, 2.0, rng);
        let norm1 = GroupNormLayer::new(store, &format!("{name}.norm1"), inner, inner_groups);
        let conv = GraphConvLayer::new(store, &format!("{name}.conv"), inner, inner, rng);
        let norm2 = GroupNormLayer::new(store, &format!("{name}.norm2"), inner, inner_groups);
        let up = Linear::new(store, &format!("{name}.up"), inner, channels, 0.0, rng);
        GraphResidualBlock { down, norm1, conv, norm2, up }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, adj: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let y = self.down.forward(tape, p, x)?;
        let y = tape.relu(self.norm1.forward(tape, p, y)?);
        let y = self.conv.forward(tape, p, adj, y)?;
        let y = tape.relu(self.norm2.forward(tape, p, y)?);
        let y = self.up.forward(tape, p, y)?;
        tape.add(x, y)
    }
}

struct AttachFeatures {
    coord_cols: usize,
}

impl Backward for AttachFeatures {
    fn name(&self) -> &'static str {
        "attach_features"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (f, coords) = (inputs[0], inputs[1]);
        let (k, c) = (f.len(), self.coord_cols);
        let width = c + k;
        let df = needs[0].then(|| {
            let mut d = vec![0.0; k];
            for r in 0..grad.rows() {
                for (acc, g) in d.iter_mut().zip(&grad.data()[r * width + c..(r + 1) * width]) {
                    *acc += g;
                }
            }
            Tensor::new(f.shape().to_vec(), d).unwrap()
        });
        let dc = needs[1].then(|| {
            let mut d = Vec::with_capacity(coords.len());
            for r in 0..grad.rows() {
                d.extend_from_slice(&grad.data()[r * width..r * width + c]);
            }
            Tensor::new(coords.shape().to_vec(), d).unwrap()
        });
        vec![df, dc]
    }
}

struct CameraActivation;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lower bound added to the softplus-mapped camera scale.
pub const MIN_CAMERA_SCALE: f64 = 1e-4;

/// Raw head value whose activation is `s`.
pub fn camera_raw_scale(s: f64) -> f64 {
    let v = s - MIN_CAMERA_SCALE;
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

impl Backward for CameraActivation {
    fn name(&self) -> &'static str {
        "camera_activation"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let raw = inputs[0].data();
        let g = grad.data();
        let d = vec![g[0] * sigmoid(raw[0]), g[1], g[2]];
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d).unwrap())]
    }
}

impl Tape {
    /// Row `i` of the result is `[coords_i, f]`: the feature row `f` (`1×k`)
    /// attached to every row of `coords`.
    pub fn attach_features(&self, f: Var, coords: Var) -> Result<Var> {
        let (out, c) = {
            let (tf, tc) = (self.value(f), self.value(coords));
            if tf.shape().len() != 2 || tf.rows() != 1 {
                return Err(Error::shape("attach_features", format!("feature must be 1×k, got {:?}", tf.shape())));
            }
            let (n, c, k) = (tc.rows(), tc.cols(), tf.cols());
            let mut d = Vec::with_capacity(n * (c + k));
            for r in 0..n {
                d.extend_from_slice(tc.row(r));
                d.extend_from_slice(tf.data());
            }
            (Tensor::new([n, c + k], d)?, c)
        };
        Ok(self.push(out, &[f, coords], AttachFeatures { coord_cols: c }))
    }

    /// Maps a raw `1×3` head output to `[softplus(raw_s) + 1e-4, tx, ty]`.
    pub fn camera_activation(&self, raw: Var) -> Result<Var> {
        let out = {
            let t = self.value(raw);
            if t.len() != 3 {
                return Err(Error::shape("camera_activation", format!("expected 3 values, got {:?}", t.shape())));
            }
            let r = t.data();
            Tensor::new([1, 3], vec![softplus(r[0]) + MIN_CAMERA_SCALE, r[1], r[2]])?
        };
        Ok(self.push(out, &[raw], CameraActivation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attach_features_layout() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::new([1, 2], vec![7.0, 8.0]).unwrap());
        let c = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.attach_features(f, c).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 7.0, 8.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let empty = tape.constant(Tensor::new([1, 0], vec![]).unwrap());
        let y = tape.attach_features(empty, c).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(c).data());
    }

    #[test]
    fn camera_scale_is_positive_and_invertible() {
        let tape = Tape::new();
        for raw in [-50.0, -1.0, 0.0, 2.0, 40.0] {
            let r = tape.constant(Tensor::new([1, 3], vec![raw, 0.1, 0.2]).unwrap());
            let s = tape.value(tape.camera_activation(r).unwrap()).data()[0];
            assert!(s > 0.0);
        }
        let r = tape.constant(Tensor::new([1, 3], vec![camera_raw_scale(0.9), 0.0, 0.0]).unwrap());
        assert!((tape.value(tape.camera_activation(r).unwrap()).data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_up_projection_gives_identity_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = GraphResidualBlock::new(&mut store, "b", 8, 1, &mut rng);
        let adj = Arc::new(SparseMatrix::identity(5));
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = Tensor::new([5, 8], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let xv = tape.constant(x.clone());
        let y = block.forward(&tape, &p, &adj, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }
}
