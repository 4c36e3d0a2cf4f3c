//! Differentiable operations recorded on a [`Tape`].
//!
//! Everything operates on 2-D row-major tensors except where noted. Scalars
//! are one-element tensors of shape `[1]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::meshgraph::{sparse_dense_multiply, sparse_transpose_dense_multiply, SparseMatrix};

use super::tape::{Backward, Tape, Var};
use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

struct MatMul;

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = dims2(a);
        let n = b.cols();
        let da = needs[0].then(|| {
            Tensor::new(a.shape().to_vec(), gemm_nt(grad.data(), b.data(), m, n, k)).unwrap()
        });
        let db = needs[1].then(|| {
            Tensor::new(b.shape().to_vec(), gemm_tn(a.data(), grad.data(), k, m, n)).unwrap()
        });
        vec![da, db]
    }
}

struct SparseMatMul {
    s: Arc<SparseMatrix>,
}

impl Backward for SparseMatMul {
    fn name(&self) -> &'static str {
        "sparse_matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let dx = needs[0].then(|| {
            let d = sparse_transpose_dense_multiply(&self.s, grad.data(), grad.rows(), grad.cols()).unwrap();
            Tensor::new(x.shape().to_vec(), d).unwrap()
        });
        vec![dx]
    }
}

struct AddOp {
    sign: f64,
}

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        if self.sign > 0.0 { "add" } else { "sub" }
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let db = needs[1].then(|| {
            let mut g = grad.clone();
            g.scale(self.sign);
            g
        });
        vec![needs[0].then(|| grad.clone()), db]
    }
}

struct MulOp;

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let prod = |other: &Tensor, like: &Tensor| {
            let d = grad.data().iter().zip(other.data()).map(|(g, o)| g * o).collect();
            Tensor::new(like.shape().to_vec(), d).unwrap()
        };
        vec![
            needs[0].then(|| prod(inputs[1], inputs[0])),
            needs[1].then(|| prod(inputs[0], inputs[1])),
        ]
    }
}

struct AddRow;

impl Backward for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let db = needs[1].then(|| {
            let cols = grad.cols();
            let mut d = vec![0.0; cols];
            for r in 0..grad.rows() {
                for (acc, g) in d.iter_mut().zip(grad.row(r)) {
                    *acc += g;
                }
            }
            Tensor::new(inputs[1].shape().to_vec(), d).unwrap()
        });
        vec![needs[0].then(|| grad.clone()), db]
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut g = grad.clone();
        g.scale(self.0);
        vec![Some(g)]
    }
}

struct Relu;

impl Backward for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(grad.shape().to_vec(), d).unwrap())]
    }
}

struct GroupNorm {
    groups: usize,
    /// Standardized input (before the affine map), same shape as the input.
    normalized: Vec<f64>,
    /// `1/sqrt(var + eps)` per (row, group).
    inv_std: Vec<f64>,
}

impl Backward for GroupNorm {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (rows, c) = dims2(x);
        let gsize = c / self.groups;
        let gam = gamma.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; rows * c];
        let mut dxhat = vec![0.0; gsize];
        for r in 0..rows {
            for g in 0..self.groups {
                let base = r * c + g * gsize;
                let istd = self.inv_std[r * self.groups + g];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for k in 0..gsize {
                    let ch = g * gsize + k;
                    let dy = grad.data()[base + k];
                    let xh = self.normalized[base + k];
                    dgamma[ch] += dy * xh;
                    dbeta[ch] += dy;
                    dxhat[k] = dy * gam[ch];
                    mean_d += dxhat[k];
                    mean_dx += dxhat[k] * xh;
                }
                mean_d /= gsize as f64;
                mean_dx /= gsize as f64;
                for k in 0..gsize {
                    let xh = self.normalized[base + k];
                    dx[base + k] = istd * (dxhat[k] - mean_d - xh * mean_dx);
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
            needs[1].then(|| Tensor::new(gamma.shape().to_vec(), dgamma).unwrap()),
            needs[2].then(|| Tensor::new(inputs[2].shape().to_vec(), dbeta).unwrap()),
        ]
    }
}

struct L1Loss {
    target: Tensor,
    row_mask: Option<Vec<bool>>,
}

impl Backward for L1Loss {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let cols = p.cols();
        let g = grad.item();
        let d = p
            .data()
            .iter()
            .zip(self.target.data())
            .enumerate()
            .map(|(i, (&a, &b))| {
                let active = self.row_mask.as_ref().is_none_or(|m| m[i / cols]);
                if !active || a == b {
                    0.0
                } else if a > b {
                    g
                } else {
                    -g
                }
            })
            .collect();
        vec![Some(Tensor::new(p.shape().to_vec(), d).unwrap())]
    }
}

struct L2Loss {
    target: Tensor,
}

impl Backward for L2Loss {
    fn name(&self) -> &'static str {
        "l2_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let c = 2.0 * grad.item() / p.len() as f64;
        let d = p.data().iter().zip(self.target.data()).map(|(a, b)| c * (a - b)).collect();
        vec![Some(Tensor::new(p.shape().to_vec(), d).unwrap())]
    }
}

struct Concat {
    axis: usize,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut out = Vec::with_capacity(inputs.len());
        match self.axis {
            0 => {
                let mut offset = 0;
                for (t, &need) in inputs.iter().zip(needs) {
                    let n = t.len();
                    out.push(need.then(|| {
                        Tensor::new(t.shape().to_vec(), grad.data()[offset..offset + n].to_vec()).unwrap()
                    }));
                    offset += n;
                }
            }
            _ => {
                let total = grad.cols();
                let mut col = 0;
                for (t, &need) in inputs.iter().zip(needs) {
                    let c = t.cols();
                    out.push(need.then(|| {
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..grad.rows() {
                            d.extend_from_slice(&grad.data()[r * total + col..r * total + col + c]);
                        }
                        Tensor::new(t.shape().to_vec(), d).unwrap()
                    }));
                    col += c;
                }
            }
        }
        out
    }
}

struct SliceCols {
    start: usize,
}

impl Backward for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (rows, total) = dims2(x);
        let width = grad.cols();
        let mut d = vec![0.0; x.len()];
        for r in 0..rows {
            d[r * total + self.start..r * total + self.start + width].copy_from_slice(grad.row(r));
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

struct MeanOverRows;

impl Backward for MeanOverRows {
    fn name(&self) -> &'static str {
        "mean_over_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let rows = x.rows();
        let inv = 1.0 / rows as f64;
        let row: Vec<f64> = grad.data().iter().map(|g| g * inv).collect();
        let d = (0..rows).flat_map(|_| row.iter().copied()).collect();
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), grad.data().to_vec()).unwrap())]
    }
}

struct Sum;

impl Backward for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.item()))]
    }
}

struct DotConst {
    weights: Tensor,
}

impl Backward for DotConst {
    fn name(&self) -> &'static str {
        "dot_const"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut w = self.weights.clone();
        w.scale(grad.item());
        vec![Some(w.reshaped(inputs[0].shape().to_vec()).unwrap())]
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    /// `A · B` for `m×k` and `k×n` operands.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k) = dims2(&ta);
            let (k2, n) = dims2(&tb);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
                return Err(Error::shape("matmul", format!("{:?} · {:?}", ta.shape(), tb.shape())));
            }
            Tensor::new([m, n], gemm(ta.data(), tb.data(), m, k, n))?
        };
        Ok(self.push(out, &[a, b], MatMul))
    }

    /// `S · X` with a constant sparse `S`.
    pub fn sparse_matmul(&self, s: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (r, c) = dims2(&tx);
            Tensor::new([s.rows(), c], sparse_dense_multiply(s, tx.data(), r, c)?)?
        };
        Ok(self.push(out, &[x], SparseMatMul { s: Arc::clone(s) }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, -1.0)
    }

    fn add_signed(&self, a: Var, b: Var, sign: f64) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            check_same(if sign > 0.0 { "add" } else { "sub" }, &ta, &tb)?;
            let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x + sign * y).collect();
            Tensor::new(ta.shape().to_vec(), d)?
        };
        Ok(self.push(out, &[a, b], AddOp { sign }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            check_same("mul", &ta, &tb)?;
            let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), d)?
        };
        Ok(self.push(out, &[a, b], MulOp))
    }

    /// Adds a length-`C` row vector to every row of an `N×C` matrix.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let out = {
            let (tx, tr) = (self.value(x), self.value(row));
            let c = tx.cols();
            if tr.len() != c {
                return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tr.shape())));
            }
            let mut d = tx.data().to_vec();
            for chunk in d.chunks_exact_mut(c) {
                for (v, b) in chunk.iter_mut().zip(tr.data()) {
                    *v += b;
                }
            }
            Tensor::new(tx.shape().to_vec(), d)?
        };
        Ok(self.push(out, &[x, row], AddRow))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = {
            let mut t = self.value(x).clone();
            t.scale(c);
            t
        };
        self.push(out, &[x], Scale(c))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = {
            let tx = self.value(x);
            let d = tx.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::new(tx.shape().to_vec(), d).unwrap()
        };
        self.push(out, &[x], Relu)
    }

    /// Per-row group standardization (biased variance) followed by a
    /// per-channel affine map.
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64, gamma: Var, beta: Var) -> Result<Var> {
        let (out, op) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let (rows, c) = dims2(&tx);
            if groups == 0 || c % groups != 0 {
                return Err(Error::shape("group_norm", format!("{c} channels into {groups} groups")));
            }
            if tg.len() != c || tb.len() != c {
                return Err(Error::shape("group_norm", "gamma/beta length must equal channel count"));
            }
            if !(eps > 0.0) {
                return Err(Error::shape("group_norm", "eps must be positive"));
            }
            let gsize = c / groups;
            let mut normalized = vec![0.0; rows * c];
            let mut inv_std = vec![0.0; rows * groups];
            let mut y = vec![0.0; rows * c];
            for r in 0..rows {
                for g in 0..groups {
                    let base = r * c + g * gsize;
                    let xs = &tx.data()[base..base + gsize];
                    let mean = xs.iter().sum::<f64>() / gsize as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std[r * groups + g] = istd;
                    for k in 0..gsize {
                        let ch = g * gsize + k;
                        let xh = (xs[k] - mean) * istd;
                        normalized[base + k] = xh;
                        y[base + k] = tg.data()[ch] * xh + tb.data()[ch];
                    }
                }
            }
            (Tensor::new(tx.shape().to_vec(), y)?, GroupNorm { groups, normalized, inv_std })
        };
        Ok(self.push(out, &[x, gamma, beta], op))
    }

    /// Sum over rows of the row-wise L1 norm of `P − T`.
    pub fn l1_loss(&self, p: Var, target: &Tensor) -> Result<Var> {
        self.l1_loss_masked(p, target, None)
    }

    /// L1 loss restricted to rows whose mask entry is `true`.
    pub fn l1_loss_masked(&self, p: Var, target: &Tensor, row_mask: Option<&[bool]>) -> Result<Var> {
        let out = {
            let tp = self.value(p);
            check_same("l1_loss", &tp, target)?;
            let cols = tp.cols();
            if let Some(m) = row_mask {
                if m.len() != tp.rows() {
                    return Err(Error::shape("l1_loss", "mask length != rows"));
                }
            }
            let total: f64 = tp
                .data()
                .iter()
                .zip(target.data())
                .enumerate()
                .filter(|(i, _)| row_mask.is_none_or(|m| m[i / cols]))
                .map(|(_, (a, b))| (a - b).abs())
                .sum();
            Tensor::scalar(total)
        };
        Ok(self.push(
            out,
            &[p],
            L1Loss { target: target.clone(), row_mask: row_mask.map(|m| m.to_vec()) },
        ))
    }

    /// Mean of squared entries of `P − T`.
    pub fn l2_loss(&self, p: Var, target: &Tensor) -> Result<Var> {
        let out = {
            let tp = self.value(p);
            check_same("l2_loss", &tp, target)?;
            let sq: f64 = tp.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Tensor::scalar(sq / tp.len() as f64)
        };
        Ok(self.push(out, &[p], L2Loss { target: target.clone() }))
    }

    /// Concatenates 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need at least one part and axis 0 or 1"));
        }
        let out = {
            let ts: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let (r0, c0) = dims2(&ts[0]);
            if axis == 0 {
                if ts.iter().any(|t| t.cols() != c0) {
                    return Err(Error::shape("concat", "column counts differ"));
                }
                let rows: usize = ts.iter().map(|t| t.rows()).sum();
                let d = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new([rows, c0], d)?
            } else {
                if ts.iter().any(|t| t.rows() != r0) {
                    return Err(Error::shape("concat", "row counts differ"));
                }
                let cols: usize = ts.iter().map(|t| t.cols()).sum();
                let mut d = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for t in &ts {
                        d.extend_from_slice(t.row(r));
                    }
                }
                Tensor::new([r0, cols], d)?
            }
        };
        Ok(self.push(out, parts, Concat { axis }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (rows, cols) = dims2(&tx);
            if start >= end || end > cols {
                return Err(Error::shape("slice_cols", format!("{start}..{end} of {cols} columns")));
            }
            let mut d = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                d.extend_from_slice(&tx.row(r)[start..end]);
            }
            Tensor::new([rows, end - start], d)?
        };
        Ok(self.push(out, &[x], SliceCols { start }))
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn split_cols(&self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let v = self.slice_cols(x, start, start + w);
                start += w;
                v
            })
            .collect()
    }

    /// Column means, shape `1×C`.
    pub fn mean_over_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (rows, cols) = dims2(&tx);
            if rows == 0 {
                return Err(Error::shape("mean_over_rows", "no rows"));
            }
            let mut d = vec![0.0; cols];
            for r in 0..rows {
                for (acc, v) in d.iter_mut().zip(tx.row(r)) {
                    *acc += v;
                }
            }
            let inv = 1.0 / rows as f64;
            d.iter_mut().for_each(|v| *v *= inv);
            Tensor::new([1, cols], d)?
        };
        Ok(self.push(out, &[x], MeanOverRows))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, &[x], Reshape))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Sum)
    }

    /// `Σ x ⊙ w` for a constant `w` with the same element count.
    pub fn dot_const(&self, x: Var, weights: &Tensor) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            if tx.len() != weights.len() {
                return Err(Error::shape("dot_const", "element counts differ"));
            }
            Tensor::scalar(tx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        };
        Ok(self.push(out, &[x], DotConst { weights: weights.clone() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let tape = Tape::new();
        let i = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t(&[&[1.5, -2.0], &[3.0, 0.25]]));
        assert_eq!(*tape.value(tape.matmul(i, b).unwrap()), *tape.value(b));
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = tape.constant(t(&[&[5.0], &[6.0]]));
        assert_eq!(tape.value(tape.matmul(a, c).unwrap()).data(), &[17.0, 39.0]);
        assert!(tape.matmul(c, a).is_err());
    }

    #[test]
    fn sparse_identity_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.0, 4.0]).unwrap());
        let y = tape.sparse_matmul(&Arc::new(SparseMatrix::identity(3)), x).unwrap();
        let g = tape.backward(tape.sum(y));
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sparse_row_stochastic_gradient_preserves_column_sums() {
        let mesh = crate::meshgraph::TemplateMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let adj = Arc::new(crate::meshgraph::build_adjacency(&mesh).into_matrix());
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.sparse_matmul(&adj, x).unwrap();
        let upstream = Tensor::new([3, 2], vec![1.0, -2.0, 0.5, 3.0, 2.0, 1.0]).unwrap();
        let g = tape.backward(tape.dot_const(y, &upstream).unwrap());
        let dx = g.get(x).unwrap();
        for c in 0..2 {
            let a: f64 = (0..3).map(|r| dx.get2(r, c)).sum();
            let b: f64 = (0..3).map(|r| upstream.get2(r, c)).sum();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn group_norm_constant_row_and_zero_gamma() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[2.0, 2.0, 2.0, 2.0], &[1.0, -3.0, 0.5, 7.0]]));
        let ones = tape.constant(Tensor::full([4], 1.0));
        let zeros = tape.constant(Tensor::zeros([4]));
        let y = tape.group_norm(x, 2, 1e-5, ones, zeros).unwrap();
        assert!(tape.value(y).row(0).iter().all(|&v| v == 0.0));
        let beta = tape.constant(Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = tape.group_norm(x, 2, 1e-5, zeros, beta).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(y).row(r), &[0.1, 0.2, 0.3, 0.4]);
        }
        assert!(tape.group_norm(x, 3, 1e-5, ones, zeros).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(tape.sum(y));
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn l1_and_l2_hand_values() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[&[1.0, -2.0, 0.0]]));
        let zero = Tensor::zeros([1, 3]);
        let l = tape.l1_loss(p, &zero).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
        let g = tape.backward(l);
        assert_eq!(g.get(p).unwrap().data(), &[1.0, -1.0, 0.0]);
        let same = tape.l1_loss(p, &t(&[&[1.0, -2.0, 0.0]])).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let q = tape.leaf(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let l2 = tape.l2_loss(q, &Tensor::zeros([2])).unwrap();
        assert_eq!(tape.value(l2).item(), 12.5);
        assert!(tape.l2_loss(q, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn concat_split_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(t(&[&[5.0], &[6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        let parts = tape.split_cols(c, &[2, 1]).unwrap();
        assert_eq!(*tape.value(parts[0]), *tape.value(a));
        assert_eq!(*tape.value(parts[1]), *tape.value(b));
        let r = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(r), vec![4, 2]);
    }

    #[test]
    fn mean_over_rows_of_constant_matrix() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]));
        assert_eq!(tape.value(tape.mean_over_rows(x).unwrap()).data(), &[1.5, -2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let xs = vec![0.3, -1.2, 2.5];
        let x = tape.leaf(Tensor::new([3], xs.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(tape.sum(sq));
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(&xs) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }
}
