//! Reverse-mode differentiation over dense f64 arrays.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] replays them in
//! reverse and accumulates exact partial derivatives into each node's grad
//! buffer. The operation set is exactly what the detector and the distillation
//! losses need. Teacher outputs enter graphs as constants
//! (`requires_grad = false`), so no gradient ever reaches them.

use thiserror::Error;

use crate::params::ParamStore;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: value count {got} does not match shape {shape:?}")]
    BadLength { op: &'static str, shape: Vec<usize>, got: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("masked softmax: row {0} has no allowed positions")]
    FullyMaskedRow(usize),
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range ({len})")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffArray {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    /// a*x + b elementwise with scalar constants; only `a` matters backward.
    Affine(usize, f64),
    Abs(usize),
    /// x: [n, d], bias: [d], broadcast over rows.
    AddRowBroadcast(usize, usize),
    Matmul(usize, usize),
    /// a · bᵀ with a: [m, k], b: [n, k].
    MatmulNt(usize, usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    /// Softmax along the last axis.
    Softmax(usize),
    /// Row softmax over a 2-D input where `mask[i*n_k + j] == false` pins
    /// entry (i, j) to exactly zero and the row renormalizes.
    MaskedSoftmaxRows(usize, std::rc::Rc<Vec<bool>>),
    /// Row-wise layer norm with learned gain and bias; aux caches (mean, rstd).
    LayerNorm { x: usize, gain: usize, bias: usize },
    /// 2-D concatenation along `axis`.
    Concat(Vec<usize>, usize),
    GatherRows(usize, std::rc::Rc<Vec<usize>>),
    SliceCols(usize, usize, usize),
    SumAll(usize),
    MeanAll(usize),
    /// Max over all entries; aux[0] holds the argmax index.
    MaxAll(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
    aux: Vec<f64>,
}

/// Recording tape. One tape per computation graph; not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}


fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> DiffArray {
        let n = values.len();
        self.nodes.push(Node {
            shape,
            grad: vec![0.0; n],
            values,
            op,
            requires_grad,
            aux: Vec::new(),
        });
        DiffArray { id: self.nodes.len() - 1 }
    }

    /// A trainable leaf (gradients accumulate into it).
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<DiffArray, GradError> {
        if values.len() != numel(shape) {
            return Err(GradError::BadLength { op: "leaf", shape: shape.to_vec(), got: values.len() });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, true))
    }

    /// A constant leaf: values the backward pass never differentiates into.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<DiffArray, GradError> {
        if values.len() != numel(shape) {
            return Err(GradError::BadLength { op: "constant", shape: shape.to_vec(), got: values.len() });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> DiffArray {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    pub fn shape(&self, x: DiffArray) -> &[usize] {
        &self.nodes[x.id].shape
    }

    pub fn values(&self, x: DiffArray) -> &[f64] {
        &self.nodes[x.id].values
    }

    pub fn grad(&self, x: DiffArray) -> &[f64] {
        &self.nodes[x.id].grad
    }

    pub fn scalar_value(&self, x: DiffArray) -> f64 {
        debug_assert_eq!(self.nodes[x.id].values.len(), 1);
        self.nodes[x.id].values[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: DiffArray,
        b: DiffArray,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<DiffArray, GradError> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(GradError::ShapeMismatch {
                op: op_name,
                a: self.nodes[a.id].shape.clone(),
                b: self.nodes[b.id].shape.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.id]
            .values
            .iter()
            .zip(&self.nodes[b.id].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(&[a.id, b.id]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, values, op, rg))
    }

    pub fn add(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn div(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a.id, b.id))
    }

    /// Elementwise min; ties take the first argument's gradient.
    pub fn minimum(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        self.binary_elementwise("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a.id, b.id))
    }

    pub fn maximum(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        self.binary_elementwise("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a.id, b.id))
    }

    /// `a*x + b` with scalar constants.
    pub fn affine(&mut self, x: DiffArray, a: f64, b: f64) -> DiffArray {
        let values: Vec<f64> = self.nodes[x.id].values.iter().map(|&v| a * v + b).collect();
        let rg = self.nodes[x.id].requires_grad;
        let shape = self.nodes[x.id].shape.clone();
        self.push(shape, values, Op::Affine(x.id, a), rg)
    }

    pub fn scale(&mut self, x: DiffArray, a: f64) -> DiffArray {
        self.affine(x, a, 0.0)
    }

    pub fn abs(&mut self, x: DiffArray) -> DiffArray {
        let values: Vec<f64> = self.nodes[x.id].values.iter().map(|&v| v.abs()).collect();
        let rg = self.nodes[x.id].requires_grad;
        let shape = self.nodes[x.id].shape.clone();
        self.push(shape, values, Op::Abs(x.id), rg)
    }

    /// `x + bias` where `x: [n, d]` and `bias: [d]`.
    pub fn add_row_broadcast(&mut self, x: DiffArray, bias: DiffArray) -> Result<DiffArray, GradError> {
        let xs = self.nodes[x.id].shape.clone();
        let bs = self.nodes[bias.id].shape.clone();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(GradError::ShapeMismatch { op: "add_row_broadcast", a: xs, b: bs });
        }
        let d = xs[1];
        let mut values = self.nodes[x.id].values.clone();
        for row in values.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(&self.nodes[bias.id].values) {
                *v += b;
            }
        }
        let rg = self.requires(&[x.id, bias.id]);
        Ok(self.push(xs, values, Op::AddRowBroadcast(x.id, bias.id), rg))
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        let sa = self.nodes[a.id].shape.clone();
        let sb = self.nodes[b.id].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GradError::ShapeMismatch { op: "matmul", a: sa, b: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        kernels::matmul_nn(&self.nodes[a.id].values, &self.nodes[b.id].values, m, k, n, &mut values);
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(vec![m, n], values, Op::Matmul(a.id, b.id), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]` (both row-major, no copy).
    pub fn matmul_nt(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        let sa = self.nodes[a.id].shape.clone();
        let sb = self.nodes[b.id].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(GradError::ShapeMismatch { op: "matmul_nt", a: sa, b: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut values = vec![0.0; m * n];
        kernels::matmul_nt(&self.nodes[a.id].values, &self.nodes[b.id].values, m, k, n, &mut values);
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(vec![m, n], values, Op::MatmulNt(a.id, b.id), rg))
    }

    fn unary(
        &mut self,
        x: DiffArray,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> DiffArray {
        let values: Vec<f64> = self.nodes[x.id].values.iter().map(|&v| f(v)).collect();
        let rg = self.nodes[x.id].requires_grad;
        let shape = self.nodes[x.id].shape.clone();
        self.push(shape, values, op, rg)
    }

    pub fn exp(&mut self, x: DiffArray) -> DiffArray {
        self.unary(x, f64::exp, Op::Exp(x.id))
    }

    pub fn log(&mut self, x: DiffArray) -> DiffArray {
        self.unary(x, f64::ln, Op::Log(x.id))
    }

    pub fn sigmoid(&mut self, x: DiffArray) -> DiffArray {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x.id))
    }

    pub fn relu(&mut self, x: DiffArray) -> DiffArray {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.id))
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp binds.
    pub fn clamp(&mut self, x: DiffArray, lo: f64, hi: f64) -> DiffArray {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x.id, lo, hi))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: DiffArray, axis: usize) -> Result<DiffArray, GradError> {
        let shape = self.nodes[x.id].shape.clone();
        if axis >= shape.len() {
            return Err(GradError::BadAxis { op: "softmax", axis, rank: shape.len() });
        }
        if self.nodes[x.id].values.iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite("softmax"));
        }
        // Reduce the general case to last-axis softmax by a transpose pair.
        if axis + 1 == shape.len() {
            return Ok(self.softmax_last(x));
        }
        let moved = self.move_axis_last(x, axis);
        let sm = self.softmax_last(moved);
        Ok(self.move_axis_back(sm, axis, &shape))
    }

    fn softmax_last(&mut self, x: DiffArray) -> DiffArray {
        let shape = self.nodes[x.id].shape.clone();
        let d = *shape.last().unwrap_or(&1);
        let mut values = self.nodes[x.id].values.clone();
        for row in values.chunks_mut(d.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        self.push(shape, values, Op::Softmax(x.id), rg)
    }

    // Axis moves are implemented as gather-by-index on the flattened array,
    // which keeps backward generic.
    fn move_axis_last(&mut self, x: DiffArray, axis: usize) -> DiffArray {
        let shape = self.nodes[x.id].shape.clone();
        let perm = axis_to_last_index_map(&shape, axis);
        let mut new_shape: Vec<usize> = shape.clone();
        let a = new_shape.remove(axis);
        new_shape.push(a);
        self.gather_flat(x, perm, new_shape)
    }

    fn move_axis_back(&mut self, x: DiffArray, axis: usize, target_shape: &[usize]) -> DiffArray {
        let forward = axis_to_last_index_map(target_shape, axis);
        let mut inverse = vec![0usize; forward.len()];
        for (dst, &src) in forward.iter().enumerate() {
            inverse[src] = dst;
        }
        // inverse[src] = dst means flat position src of the target came from
        // position dst of the moved array.
        self.gather_flat(x, inverse, target_shape.to_vec())
    }

    fn gather_flat(&mut self, x: DiffArray, index: Vec<usize>, new_shape: Vec<usize>) -> DiffArray {
        let values: Vec<f64> = index.iter().map(|&i| self.nodes[x.id].values[i]).collect();
        let rg = self.nodes[x.id].requires_grad;
        // Reuse GatherRows with row length 1 by storing flat indices.
        let node = self.push(new_shape, values, Op::GatherRows(x.id, std::rc::Rc::new(index)), rg);
        self.nodes[node.id].aux = vec![1.0]; // marker: flat gather, element granularity
        node
    }

    /// Row softmax over a 2-D input under a boolean mask (`true` = allowed).
    /// Masked entries are exactly zero; allowed entries renormalize.
    pub fn masked_softmax_rows(&mut self, x: DiffArray, mask: &[bool]) -> Result<DiffArray, GradError> {
        let shape = self.nodes[x.id].shape.clone();
        if shape.len() != 2 || mask.len() != numel(&shape) {
            return Err(GradError::BadLength { op: "masked_softmax_rows", shape, got: mask.len() });
        }
        if self.nodes[x.id].values.iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite("masked_softmax_rows"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut values = vec![0.0; rows * cols];
        for i in 0..rows {
            let row_mask = &mask[i * cols..(i + 1) * cols];
            let row_x = &self.nodes[x.id].values[i * cols..(i + 1) * cols];
            let mut m = f64::NEG_INFINITY;
            for j in 0..cols {
                if row_mask[j] {
                    m = m.max(row_x[j]);
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(GradError::FullyMaskedRow(i));
            }
            let mut z = 0.0;
            for j in 0..cols {
                if row_mask[j] {
                    let e = (row_x[j] - m).exp();
                    values[i * cols + j] = e;
                    z += e;
                }
            }
            for j in 0..cols {
                values[i * cols + j] /= z;
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(
            shape,
            values,
            Op::MaskedSoftmaxRows(x.id, std::rc::Rc::new(mask.to_vec())),
            rg,
        ))
    }

    /// Row-wise layer norm over `x: [n, d]` with learned `gain`/`bias: [d]`.
    pub fn layer_norm_rows(
        &mut self,
        x: DiffArray,
        gain: DiffArray,
        bias: DiffArray,
    ) -> Result<DiffArray, GradError> {
        let xs = self.nodes[x.id].shape.clone();
        let gs = self.nodes[gain.id].shape.clone();
        if xs.len() != 2 || gs.len() != 1 || gs[0] != xs[1] || self.nodes[bias.id].shape != gs {
            return Err(GradError::ShapeMismatch { op: "layer_norm_rows", a: xs, b: gs });
        }
        let (n, d) = (xs[0], xs[1]);
        const EPS: f64 = 1e-5;
        let mut values = vec![0.0; n * d];
        let mut aux = Vec::with_capacity(2 * n);
        for i in 0..n {
            let row = &self.nodes[x.id].values[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                values[i * d + j] = xhat * self.nodes[gain.id].values[j] + self.nodes[bias.id].values[j];
            }
            aux.push(mean);
            aux.push(rstd);
        }
        let rg = self.requires(&[x.id, gain.id, bias.id]);
        let out = self.push(xs, values, Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id }, rg);
        self.nodes[out.id].aux = aux;
        Ok(out)
    }

    /// Concatenate 2-D arrays along `axis` (0 or 1).
    pub fn concat(&mut self, parts: &[DiffArray], axis: usize) -> Result<DiffArray, GradError> {
        assert!(!parts.is_empty(), "concat of zero arrays");
        if axis > 1 {
            return Err(GradError::BadAxis { op: "concat", axis, rank: 2 });
        }
        let first = self.nodes[parts[0].id].shape.clone();
        if first.len() != 2 {
            return Err(GradError::BadAxis { op: "concat", axis, rank: first.len() });
        }
        let fixed = 1 - axis;
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.id].shape.clone();
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(GradError::ShapeMismatch { op: "concat", a: first, b: s });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (rows, cols) = (shape[0], shape[1]);
        let mut values = vec![0.0; rows * cols];
        if axis == 0 {
            let mut off = 0;
            for p in parts {
                let v = &self.nodes[p.id].values;
                values[off..off + v.len()].copy_from_slice(v);
                off += v.len();
            }
        } else {
            let mut col_off = 0;
            for p in parts {
                let pc = self.nodes[p.id].shape[1];
                for i in 0..rows {
                    let src = &self.nodes[p.id].values[i * pc..(i + 1) * pc];
                    values[i * cols + col_off..i * cols + col_off + pc].copy_from_slice(src);
                }
                col_off += pc;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(shape, values, Op::Concat(ids, axis), rg))
    }

    /// Differentiable row gather: output row r is input row `indices[r]`.
    pub fn gather_rows(&mut self, x: DiffArray, indices: &[usize]) -> Result<DiffArray, GradError> {
        let shape = self.nodes[x.id].shape.clone();
        assert_eq!(shape.len(), 2, "gather_rows expects a 2-D input");
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(GradError::IndexOutOfRange { op: "gather_rows", index: bad, len: n });
        }
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(&self.nodes[x.id].values[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(
            vec![indices.len(), d],
            values,
            Op::GatherRows(x.id, std::rc::Rc::new(indices.to_vec())),
            rg,
        ))
    }

    /// Columns `[start, end)` of a 2-D array.
    pub fn slice_cols(&mut self, x: DiffArray, start: usize, end: usize) -> Result<DiffArray, GradError> {
        let shape = self.nodes[x.id].shape.clone();
        assert_eq!(shape.len(), 2, "slice_cols expects a 2-D input");
        let (n, d) = (shape[0], shape[1]);
        if end > d || start > end {
            return Err(GradError::IndexOutOfRange { op: "slice_cols", index: end, len: d });
        }
        let w = end - start;
        let mut values = Vec::with_capacity(n * w);
        for i in 0..n {
            values.extend_from_slice(&self.nodes[x.id].values[i * d + start..i * d + end]);
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(vec![n, w], values, Op::SliceCols(x.id, start, end), rg))
    }

    pub fn sum_all(&mut self, x: DiffArray) -> DiffArray {
        let s: f64 = self.nodes[x.id].values.iter().sum();
        let rg = self.nodes[x.id].requires_grad;
        self.push(vec![], vec![s], Op::SumAll(x.id), rg)
    }

    pub fn mean_all(&mut self, x: DiffArray) -> DiffArray {
        let n = self.nodes[x.id].values.len().max(1);
        let s: f64 = self.nodes[x.id].values.iter().sum();
        let rg = self.nodes[x.id].requires_grad;
        self.push(vec![], vec![s / n as f64], Op::MeanAll(x.id), rg)
    }

    pub fn max_all(&mut self, x: DiffArray) -> DiffArray {
        let (arg, &m) = self.nodes[x.id]
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("max_all of empty array");
        let rg = self.nodes[x.id].requires_grad;
        let out = self.push(vec![], vec![m], Op::MaxAll(x.id), rg);
        self.nodes[out.id].aux = vec![arg as f64];
        out
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray, GradError> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(GradError::ShapeMismatch {
                op: "mse",
                a: self.nodes[a.id].shape.clone(),
                b: self.nodes[b.id].shape.clone(),
            });
        }
        let n = self.nodes[a.id].values.len().max(1);
        let s: f64 = self.nodes[a.id]
            .values
            .iter()
            .zip(&self.nodes[b.id].values)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(vec![], vec![s / n as f64], Op::Mse(a.id, b.id), rg))
    }

    /// Accumulate dLoss/dNode into every reachable node's grad buffer.
    /// Repeated calls without [`Tape::zero_grad`] accumulate additively.
    pub fn backward(&mut self, loss: DiffArray) -> Result<(), GradError> {
        if numel(&self.nodes[loss.id].shape) != 1 {
            return Err(GradError::NonScalarLoss(self.nodes[loss.id].shape.clone()));
        }
        // Mark nodes that both feed the loss and require gradients.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.id];
        while let Some(id) = stack.pop() {
            if reachable[id] || !self.nodes[id].requires_grad {
                continue;
            }
            reachable[id] = true;
            for input in op_inputs(&self.nodes[id].op) {
                stack.push(input);
            }
        }
        if !reachable[loss.id] {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        // Pass-local adjoints keep repeated backward calls additive.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            if !reachable[id] || adj[id].is_none() {
                continue;
            }
            let g = adj[id].take().unwrap();
            self.propagate(id, &g, &mut adj);
            for (dst, src) in self.nodes[id].grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        Ok(())
    }

    fn add_adj(&self, adj: &mut [Option<Vec<f64>>], id: usize, contrib: impl Fn(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = adj[id].get_or_insert_with(|| vec![0.0; self.nodes[id].values.len()]);
        contrib(buf);
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let vals = |i: usize| -> &[f64] { &self.nodes[i].values };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_adj(adj, *a, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                self.add_adj(adj, *b, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                self.add_adj(adj, *a, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                self.add_adj(adj, *b, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals(*a), vals(*b));
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                self.add_adj(adj, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (vals(*a), vals(*b));
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / bv[i];
                    }
                });
                self.add_adj(adj, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (vals(*a), vals(*b));
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] <= bv[i] {
                            buf[i] += g[i];
                        }
                    }
                });
                self.add_adj(adj, *b, |buf| {
                    for i in 0..buf.len() {
                        if av[i] > bv[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (vals(*a), vals(*b));
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] >= bv[i] {
                            buf[i] += g[i];
                        }
                    }
                });
                self.add_adj(adj, *b, |buf| {
                    for i in 0..buf.len() {
                        if av[i] < bv[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Affine(a, k) => {
                let k = *k;
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * k;
                    }
                });
            }
            Op::Abs(a) => {
                let av = vals(*a);
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i].signum() * (av[i] != 0.0) as u8 as f64;
                    }
                });
            }
            Op::AddRowBroadcast(x, b) => {
                let d = self.nodes[*b].values.len();
                self.add_adj(adj, *x, |buf| buf.iter_mut().zip(g).for_each(|(dst, s)| *dst += s));
                self.add_adj(adj, *b, |buf| {
                    for row in g.chunks(d) {
                        for (dst, s) in buf.iter_mut().zip(row) {
                            *dst += s;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (av, bv) = (vals(*a), vals(*b));
                self.add_adj(adj, *a, |buf| kernels::matmul_nt(g, bv, m, n, k, buf));
                self.add_adj(adj, *b, |buf| kernels::matmul_tn(av, g, m, k, n, buf));
            }
            Op::MatmulNt(a, b) => {
                // y = a·bᵀ; dA += g·b, dB += gᵀ·a.
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                let (av, bv) = (vals(*a), vals(*b));
                self.add_adj(adj, *a, |buf| kernels::matmul_nn(g, bv, m, n, k, buf));
                self.add_adj(adj, *b, |buf| kernels::matmul_tn(g, av, m, n, k, buf));
            }
            Op::Exp(a) => {
                let yv = &self.nodes[id].values;
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * yv[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = vals(*a);
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / av[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].values;
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let av = vals(*a);
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = vals(*a);
                let (lo, hi) = (*lo, *hi);
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] >= lo && av[i] <= hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let yv = &self.nodes[id].values;
                let d = *self.nodes[id].shape.last().unwrap_or(&1);
                self.add_adj(adj, *a, |buf| {
                    for r in 0..buf.len() / d {
                        let (y, gr) = (&yv[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            buf[r * d + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows(a, mask) => {
                let yv = &self.nodes[id].values;
                let d = self.nodes[id].shape[1];
                self.add_adj(adj, *a, |buf| {
                    for r in 0..buf.len() / d {
                        let y = &yv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let rm = &mask[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            if rm[j] {
                                buf[r * d + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, d) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let xv = vals(*x);
                let gv = vals(*gain);
                let aux = &self.nodes[id].aux;
                self.add_adj(adj, *x, |buf| {
                    for r in 0..n {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // dxhat_j = g_j * gain_j; dx via the standard layer-norm backward.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            buf[r * d + j] +=
                                rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                });
                self.add_adj(adj, *gain, |buf| {
                    for r in 0..n {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for j in 0..d {
                            buf[j] += g[r * d + j] * (xv[r * d + j] - mean) * rstd;
                        }
                    }
                });
                self.add_adj(adj, *bias, |buf| {
                    for r in 0..n {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].values.len();
                        self.add_adj(adj, p, |buf| {
                            buf.iter_mut().zip(&g[off..off + len]).for_each(|(d, s)| *d += s);
                        });
                        off += len;
                    }
                } else {
                    let rows = self.nodes[id].shape[0];
                    let cols = self.nodes[id].shape[1];
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].shape[1];
                        self.add_adj(adj, p, |buf| {
                            for i in 0..rows {
                                for j in 0..pc {
                                    buf[i * pc + j] += g[i * cols + col_off + j];
                                }
                            }
                        });
                        col_off += pc;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                // aux marker distinguishes flat (element) gathers from row gathers.
                if self.nodes[id].aux.first() == Some(&1.0) {
                    self.add_adj(adj, *a, |buf| {
                        for (dst_pos, &src) in indices.iter().enumerate() {
                            buf[src] += g[dst_pos];
                        }
                    });
                } else {
                    let d = self.nodes[id].shape[1];
                    self.add_adj(adj, *a, |buf| {
                        for (r, &src) in indices.iter().enumerate() {
                            for j in 0..d {
                                buf[src * d + j] += g[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols(a, start, end) => {
                let d = self.nodes[*a].shape[1];
                let w = end - start;
                let start = *start;
                self.add_adj(adj, *a, |buf| {
                    for r in 0..g.len() / w {
                        for j in 0..w {
                            buf[r * d + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let s = g[0];
                self.add_adj(adj, *a, |buf| buf.iter_mut().for_each(|d| *d += s));
            }
            Op::MeanAll(a) => {
                let s = g[0] / self.nodes[*a].values.len().max(1) as f64;
                self.add_adj(adj, *a, |buf| buf.iter_mut().for_each(|d| *d += s));
            }
            Op::MaxAll(a) => {
                let arg = self.nodes[id].aux[0] as usize;
                let s = g[0];
                self.add_adj(adj, *a, |buf| buf[arg] += s);
            }
            Op::Mse(a, b) => {
                let n = self.nodes[*a].values.len().max(1) as f64;
                let (av, bv) = (vals(*a), vals(*b));
                let s = 2.0 * g[0] / n;
                self.add_adj(adj, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += s * (av[i] - bv[i]);
                    }
                });
                self.add_adj(adj, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= s * (av[i] - bv[i]);
                    }
                });
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Minimum(a, b)
        | Op::Maximum(a, b)
        | Op::AddRowBroadcast(a, b)
        | Op::Matmul(a, b)
        | Op::MatmulNt(a, b)
        | Op::Mse(a, b) => vec![*a, *b],
        Op::Affine(a, _)
        | Op::Abs(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Clamp(a, _, _)
        | Op::Softmax(a)
        | Op::MaskedSoftmaxRows(a, _)
        | Op::GatherRows(a, _)
        | Op::SliceCols(a, _, _)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::MaxAll(a) => vec![*a],
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::Concat(parts, _) => parts.clone(),
    }
}

/// Flat index map that moves `axis` to the last position.
fn axis_to_last_index_map(shape: &[usize], axis: usize) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut order: Vec<usize> = (0..rank).filter(|&i| i != axis).collect();
    order.push(axis);
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    loop {
        let flat: usize = order.iter().zip(&idx).map(|(&dim, &i)| strides[dim] * i).sum();
        map.push(flat);
        // Odometer over the permuted dims.
        let mut k = rank;
        while k > 0 {
            k -= 1;
            idx[k] += 1;
            if idx[k] < shape[order[k]] {
                break;
            }
            idx[k] = 0;
            if k == 0 {
                return map;
            }
        }
        if map.len() == total {
            return map;
        }
    }
}

/// Central-difference gradient of `f` w.r.t. every parameter in `params`.
/// Uses the five-point fourth-order stencil so the h² truncation term drops
/// out; this matters near high-curvature points (e.g. a LayerNorm whose input
/// rows are nearly constant) where the plain two-point scheme loses several
/// digits.
pub fn finite_diff_grad<F>(
    mut f: F,
    params: &mut ParamStore,
    h: f64,
) -> Vec<(String, Vec<f64>)>
where
    F: FnMut(&ParamStore) -> f64,
{
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let len = params.get(&name).expect("param exists").data.len();
        let mut grad = vec![0.0; len];
        for i in 0..len {
            let orig = params.get(&name).unwrap().data[i];
            let mut eval = |delta: f64| {
                params.get_mut(&name).unwrap().data[i] = orig + delta;
                f(params)
            };
            let fm2 = eval(-2.0 * h);
            let fm1 = eval(-h);
            let fp1 = eval(h);
            let fp2 = eval(2.0 * h);
            params.get_mut(&name).unwrap().data[i] = orig;
            // Group as differences so directions the objective genuinely
            // does not depend on yield exactly zero instead of a
            // cancellation residue.
            grad[i] = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h);
        }
        out.push((name, grad));
    }
    out
}

mod kernels {
    /// out += a · b, a: m×k, b: k×n.
    pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// out += a · bᵀ, a: m×k, b: n×k.
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                let dot: f64 = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                out[i * n + j] += dot;
            }
        }
    }

    /// out += aᵀ · b, a: k×m, b: k×n.
    pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let api = a[p * m + i];
                if api == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += api * bv;
                }
            }
        }
    }
}
