use std::collections::HashMap;

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{kernels, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Softmax(Var),
    Sum(Var),
    RowNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Tape of recorded operations.
///
/// Nodes are appended in forward execution order; [`Graph::backward`] walks
/// them in exact reverse. Gradients persist only on leaves created with
/// `requires_grad`, and accumulate across repeated backward calls.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads
            .get(&v.0)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that collects gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Adds the gradients of every parameter leaf into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (&id, var) in ids {
            if let Some(g) = self.leaf_grads.get(&var.0) {
                grads.add(id, g);
            }
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: shape.to_vec(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r, :] + row` for every row `r`; `row` holds exactly `cols(a)` values.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (_, cols) = self.value(a).dims2();
        if self.value(row).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// `a[r, :] * col[r]` for every row `r`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(a).dims2();
        if self.value(col).len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(col).to_vec(),
            });
        }
        let c = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols.max(1))
            .zip(c)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |x| x * s))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(t, Op::ScaleRows(a, col), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("map preserves shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, elu, Op::Elu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2();
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. In eval mode (`train == false`) this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::KeepProbability(keep));
        }
        if !train || keep == 1.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        if axis > 1 {
            return Err(TensorError::BadAxis { op: "concat", axis });
        }
        let (rows0, cols0) = self.matrix_dims("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            let ok = if axis == 0 { c == cols0 } else { r == rows0 };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            dims.push((r, c));
        }
        let (out, shape) = if axis == 0 {
            let mut out = Vec::new();
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            let rows = dims.iter().map(|d| d.0).sum();
            (out, vec![rows, cols0])
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows0 * cols);
            for r in 0..rows0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(r));
                }
            }
            (out, vec![rows0, cols])
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows (`axis == 0`) or columns (`axis == 1`) `start..end` of a matrix.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("slice", x)?;
        if axis > 1 {
            return Err(TensorError::BadAxis { op: "slice", axis });
        }
        let size = if axis == 0 { rows } else { cols };
        if start > end || end > size {
            return Err(TensorError::OutOfBounds {
                op: "slice",
                start,
                end,
                size,
            });
        }
        let src = self.value(x).data();
        let (out, shape) = if axis == 0 {
            (src[start * cols..end * cols].to_vec(), vec![end - start, cols])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                out.extend_from_slice(&src[r * cols + start..r * cols + end]);
            }
            (out, vec![rows, w])
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(cols, rows, out), Op::Transpose(x), rg))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax restricted to entries where `allowed` is true; all
    /// other entries are exactly zero and pass no gradient.
    ///
    /// `allowed` is row-major with the same element count as `x`.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var, TensorError> {
        if allowed.len() != self.value(x).len() {
            return Err(TensorError::MaskSize {
                logits: self.shape(x).to_vec(),
                mask: allowed.len(),
            });
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let ok = |c: usize| allowed.map_or(true, |m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptyMaskRow { row: r });
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for c in 0..cols {
                if ok(c) {
                    let e = (row[c] - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Euclidean norm of every row: `rows x cols -> rows x 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (rows, cols) = self.value(x).dims2();
        let src = self.value(x).data();
        let out = (0..rows)
            .map(|r| {
                src[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::column(out), Op::RowNorm(x), rg)
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads);
            let persist = matches!(node.op, Op::Leaf) && node.requires_grad;
            if persist {
                let acc = self
                    .leaf_grads
                    .entry(i)
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let len = |v: &Var| nodes[v.0].value.len();
        let val = |v: &Var| nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().1;
                if needs(a) {
                    // dA += dC * B^T
                    add_into(&mut grads[a.0], m * k, |dst| {
                        kernels::gemm(m, n, k, g, (n, 1), val(b), (1, n), dst)
                    });
                }
                if needs(b) {
                    // dB += A^T * dC
                    add_into(&mut grads[b.0], k * n, |dst| {
                        kernels::gemm(k, m, n, val(a), (1, k), g, (n, 1), dst)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(&mut grads[v.0], g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                    });
                }
                if needs(b) {
                    add_into(&mut grads[b.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if needs(v) {
                        let o = val(other);
                        add_into(&mut grads[v.0], g.len(), |d| {
                            for i in 0..d.len() {
                                d[i] += g[i] * o[i];
                            }
                        });
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                    });
                }
                if needs(row) {
                    let cols = len(row);
                    add_into(&mut grads[row.0], cols, |d| {
                        for chunk in g.chunks(cols) {
                            d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::ScaleRows(a, col) => {
                let rows = len(col);
                let cols = if rows == 0 { 0 } else { g.len() / rows };
                let c = val(col);
                if needs(a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for r in 0..rows {
                            for j in 0..cols {
                                d[r * cols + j] += g[r * cols + j] * c[r];
                            }
                        }
                    });
                }
                if needs(col) {
                    let av = val(a);
                    add_into(&mut grads[col.0], rows, |d| {
                        for r in 0..rows {
                            let mut s = 0.0;
                            for j in 0..cols {
                                s += g[r * cols + j] * av[r * cols + j];
                            }
                            d[r] += s;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
                    });
                }
            }
            Op::Sigmoid(a) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Elu(a) => {
                if needs(a) {
                    let x = val(a);
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += if x[i] > 0.0 { g[i] } else { g[i] * (y[i] + 1.0) };
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if needs(a) {
                    let x = val(a);
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for i in 0..d.len() {
                            let s = if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d[i] += g[i] * s;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = len(gamma);
                let rows = inv_std.len();
                if needs(beta) {
                    add_into(&mut grads[beta.0], cols, |d| {
                        for chunk in g.chunks(cols) {
                            d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                        }
                    });
                }
                if needs(gamma) {
                    add_into(&mut grads[gamma.0], cols, |d| {
                        for i in 0..g.len() {
                            d[i % cols] += g[i] * xhat[i];
                        }
                    });
                }
                if needs(x) {
                    let gm = val(gamma);
                    let n = cols as f64;
                    add_into(&mut grads[x.0], g.len(), |d| {
                        for r in 0..rows {
                            let base = r * cols;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..cols {
                                let dh = g[base + c] * gm[c];
                                s1 += dh;
                                s2 += dh * xhat[base + c];
                            }
                            for c in 0..cols {
                                let dh = g[base + c] * gm[c];
                                d[base + c] +=
                                    inv_std[r] / n * (n * dh - s1 - xhat[base + c] * s2);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if needs(x) {
                    add_into(&mut grads[x.0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * mask[i];
                        }
                    });
                }
            }
            Op::Concat { axis, parts } => {
                let (rows, cols) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = nodes[p.0].value.dims2();
                    if needs(p) {
                        add_into(&mut grads[p.0], pr * pc, |d| {
                            if *axis == 0 {
                                let src = &g[offset * cols..(offset + pr) * cols];
                                d.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                            } else {
                                for r in 0..rows {
                                    let src = &g[r * cols + offset..r * cols + offset + pc];
                                    d[r * pc..(r + 1) * pc]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(d, g)| *d += g);
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                if needs(x) {
                    let (rows, cols) = nodes[x.0].value.dims2();
                    let (_, w) = node.value.dims2();
                    add_into(&mut grads[x.0], rows * cols, |d| {
                        if *axis == 0 {
                            let dst = &mut d[start * cols..start * cols + g.len()];
                            dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                        } else {
                            for r in 0..rows {
                                let dst = &mut d[r * cols + start..r * cols + start + w];
                                dst.iter_mut()
                                    .zip(&g[r * w..(r + 1) * w])
                                    .for_each(|(d, g)| *d += g);
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if needs(x) {
                    let (rows, cols) = nodes[x.0].value.dims2();
                    add_into(&mut grads[x.0], rows * cols, |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[r * cols + c] += g[c * rows + r];
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let (rows, cols) = node.value.dims2();
                    add_into(&mut grads[x.0], rows * cols, |d| {
                        for r in 0..rows {
                            let ys = &y[r * cols..(r + 1) * cols];
                            let gs = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                d[r * cols + c] += ys[c] * (gs[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    let n = len(x);
                    add_into(&mut grads[x.0], n, |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
            }
            Op::RowNorm(x) => {
                if needs(x) {
                    let (rows, cols) = nodes[x.0].value.dims2();
                    let xv = val(x);
                    add_into(&mut grads[x.0], rows * cols, |d| {
                        for r in 0..rows {
                            if y[r] > 0.0 {
                                let s = g[r] / y[r];
                                for c in 0..cols {
                                    d[r * cols + c] += s * xv[r * cols + c];
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}
