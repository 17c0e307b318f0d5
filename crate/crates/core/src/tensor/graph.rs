use rand::Rng;

use super::{dims2, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-feature statistics of a training-mode batch norm, for updating
/// running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance over the normalized rows.
    pub var: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Normalize {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        axis: NormAxis,
    },
    BatchNormEval {
        x: Var,
        gain: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
        bias: Var,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Dropout(Var, Vec<f64>),
    SegmentMax(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormAxis {
    /// Statistics per row (layer norm).
    Row,
    /// Statistics per column over all rows (batch norm, train mode).
    Column,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// A single-use recording of tensor operations.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// the backward sweep walks the node list in reverse and visits every node
/// exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    retain_grads: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            retain_grads: true,
        }
    }

    /// When disabled, gradients of intermediate nodes are released as soon
    /// as they have been propagated; only leaf gradients survive `backward`.
    pub fn set_retain_grads(&mut self, retain: bool) {
        self.retain_grads = retain;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Transpose(a)
            | Op::Dropout(a, _)
            | Op::SegmentMax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorms(a) => vec![*a],
            Op::Normalize { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::BatchNormEval { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    /// Records a tensor as a leaf; it is differentiable when the tensor
    /// requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let v = self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = tensor.requires_grad();
        v
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copies the node's value (and gradient, if populated) into a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone())
            .expect("graph nodes always hold consistent shapes");
        t.set_requires_grad(node.requires_grad);
        t.grad = self.grads[v.0].clone();
        t
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    // ---------------------------------------------------------------------
    // forward operations
    // ---------------------------------------------------------------------

    /// Matrix product `[r×k]·[k×c] → [r×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, r, k, c);
        Ok(self.push(vec![r, c], out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor))
    }

    /// Adds a `[d]` row to every row of an `[n×d]` matrix (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.dims(x);
        if self.value(row).len() != d {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row)))
    }

    /// Multiplies every row of an `[n×d]` matrix by a `[d]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.dims(x);
        if self.value(row).len() != d {
            return Err(self.shape_err("mul_row", x, row));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, row)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = vec![0.0; r * c];
        for (row, dst) in xs.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x)))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine `gain`/`bias`; epsilon 1e-5 is added to the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check_affine("layer_norm", x, gain, bias)?;
        let (n, d) = self.dims(x);
        let xs = self.value(x);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let out = self.affine(&xhat, d, gain, bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Normalize {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                axis: NormAxis::Row,
            },
        ))
    }

    /// Training-mode batch normalization: each feature column is normalized
    /// with the statistics of the current rows. Returns the batch statistics
    /// so callers can maintain running averages.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<(Var, BatchStats)> {
        self.check_affine("batch_norm", x, gain, bias)?;
        let (n, d) = self.dims(x);
        let xs = self.value(x);
        let mut mean = vec![0.0; d];
        for row in xs.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in xs.chunks_exact(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        for (src, dst) in xs.chunks_exact(d).zip(xhat.chunks_exact_mut(d)) {
            for j in 0..d {
                dst[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let out = self.affine(&xhat, d, gain, bias);
        let v = self.push(
            self.shape(x).to_vec(),
            out,
            Op::Normalize {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                axis: NormAxis::Column,
            },
        );
        Ok((v, BatchStats { mean, var, rows: n }))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        self.check_affine("batch_norm_eval", x, gain, bias)?;
        let (_, d) = self.dims(x);
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::Shape {
                op: "batch_norm_eval",
                lhs: self.shape(x).to_vec(),
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let xhat: Vec<f64> = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|row| (0..d).map(|j| (row[j] - running_mean[j]) * inv_std[j]).collect::<Vec<_>>())
            .collect();
        let out = self.affine(&xhat, d, gain, bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNormEval {
                x,
                gain,
                inv_std,
                xhat,
                bias,
            },
        ))
    }

    /// Concatenates along the feature axis; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (n, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != n {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![n, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks row blocks; all inputs share the feature width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (_, d) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != d {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        if len == 0 || start + len > d {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![n, len], out, Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], out, Op::SliceRows(x, start)))
    }

    /// Builds a matrix whose i-th row is row `indices[i]` of `x`; gradients
    /// scatter-add back.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(x);
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![bad],
            });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows(x, indices.to_vec()),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; in
    /// evaluation mode this is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = zip_map(self.value(x), &mask, |a, m| a * m);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout(x, mask)))
    }

    /// Column-wise maximum over all rows, `[n×d] → [d]`. The gradient goes
    /// to the first row attaining the maximum in each column.
    pub fn max_over_points(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let v = self.segment_max(x, n)?;
        // segment_max over a single segment already has shape [1, d]
        let node = &mut self.nodes[v.0];
        node.shape = vec![d];
        Ok(v)
    }

    /// Column-wise maximum within consecutive row blocks of `segment` rows,
    /// `[(b·segment)×d] → [b×d]`.
    pub fn segment_max(&mut self, x: Var, segment: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        if segment == 0 || n == 0 || n % segment != 0 {
            return Err(Error::Shape {
                op: "segment_max",
                lhs: self.shape(x).to_vec(),
                rhs: vec![segment],
            });
        }
        let blocks = n / segment;
        let xs = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; blocks * d];
        let mut arg = vec![0usize; blocks * d];
        for b in 0..blocks {
            for i in b * segment..(b + 1) * segment {
                let row = &xs[i * d..(i + 1) * d];
                for j in 0..d {
                    // strict comparison keeps the lowest index on ties
                    if row[j] > out[b * d + j] || i == b * segment {
                        out[b * d + j] = row[j];
                        arg[b * d + j] = i;
                    }
                }
            }
        }
        Ok(self.push(vec![blocks, d], out, Op::SegmentMax(x, arg)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x))
    }

    /// Euclidean norm of every row, `[n×d] → [n×1]`.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let out = self
            .value(x)
            .chunks_exact(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(vec![n, 1], out, Op::RowNorms(x))
    }

    /// Shared per-point linear layers `x·Wᵢ + bᵢ`, with ReLU between
    /// consecutive layers when `relu_between` is set (never after the last).
    pub fn pointwise_mlp(&mut self, x: Var, layers: &[(Var, Var)], relu_between: bool) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            if i > 0 && relu_between {
                h = self.relu(h);
            }
            h = self.matmul(h, w)?;
            h = self.add_row(h, b)?;
        }
        Ok(h)
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every differentiable ancestor of a
    /// scalar loss. Previously accumulated gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalar(self.nodes[loss.0].shape.clone()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph {
            nodes,
            grads,
            retain_grads,
        } = self;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            propagate(nodes, grads, idx, &g);
            if *retain_grads {
                grads[idx] = Some(g);
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // helpers
    // ---------------------------------------------------------------------

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn check_affine(&self, op: &'static str, x: Var, gain: Var, bias: Var) -> Result<()> {
        let (_, d) = self.dims(x);
        if self.value(gain).len() != d {
            return Err(self.shape_err(op, x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.shape_err(op, x, bias));
        }
        Ok(())
    }

    fn affine(&self, xhat: &[f64], d: usize, gain: Var, bias: Var) -> Vec<f64> {
        let g = self.value(gain);
        let b = self.value(bias);
        xhat.chunks_exact(d)
            .flat_map(|row| (0..d).map(move |j| row[j] * g[j] + b[j]))
            .collect()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `out = a·b` with `a: r×k`, `b: k×c`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let dst = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let node = &nodes[idx];
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (r, k) = dims2(&nodes[a.0].shape);
            let (_, c) = dims2(&nodes[b.0].shape);
            let av = &nodes[a.0].data;
            let bv = &nodes[b.0].data;
            // dA = dC · Bᵀ
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        let brow = &bv[p * c..(p + 1) * c];
                        ga[i * k + p] += gr.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            // dB = Aᵀ · dC
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        let av = av[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * c..(p + 1) * c].iter_mut().zip(gr) {
                            *o += av * gv;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_assign(ga, g));
            accumulate(grads, nodes, *b, |gb| add_assign(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_assign(ga, g));
            accumulate(grads, nodes, *b, |gb| {
                for (o, v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = &nodes[a.0].data;
            let bv = &nodes[b.0].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |ga| {
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += v * s;
                }
            });
        }
        Op::AddRow(x, row) => {
            let d = nodes[row.0].data.len();
            accumulate(grads, nodes, *x, |gx| add_assign(gx, g));
            accumulate(grads, nodes, *row, |gr| {
                for chunk in g.chunks_exact(d) {
                    add_assign(gr, chunk);
                }
            });
        }
        Op::MulRow(x, row) => {
            let rv = &nodes[row.0].data;
            let xv = &nodes[x.0].data;
            let d = rv.len();
            accumulate(grads, nodes, *x, |gx| {
                for (i, o) in gx.iter_mut().enumerate() {
                    *o += g[i] * rv[i % d];
                }
            });
            accumulate(grads, nodes, *row, |gr| {
                for i in 0..g.len() {
                    gr[i % d] += g[i] * xv[i];
                }
            });
        }
        Op::Relu(x) => {
            let xv = &nodes[x.0].data;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Tanh(x) => {
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let (_, c) = dims2(&node.shape);
            accumulate(grads, nodes, *x, |gx| {
                for ((y, gy), dst) in out
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] += y[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::Normalize {
            x,
            gain,
            bias,
            xhat,
            inv_std,
            axis,
        } => {
            let (n, d) = dims2(&node.shape);
            let gv = &nodes[gain.0].data;
            accumulate(grads, nodes, *gain, |gg| {
                for i in 0..n {
                    for j in 0..d {
                        gg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |gb| {
                for chunk in g.chunks_exact(d) {
                    add_assign(gb, chunk);
                }
            });
            accumulate(grads, nodes, *x, |gx| match axis {
                NormAxis::Row => {
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            gx[i * d + j] += inv_std[i] * (dxh - m1 - xhat[i * d + j] * m2);
                        }
                    }
                }
                NormAxis::Column => {
                    let mut m1 = vec![0.0; d];
                    let mut m2 = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            m1[j] += dxh;
                            m2[j] += dxh * xhat[i * d + j];
                        }
                    }
                    for j in 0..d {
                        m1[j] /= n as f64;
                        m2[j] /= n as f64;
                    }
                    for i in 0..n {
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            gx[i * d + j] += inv_std[j] * (dxh - m1[j] - xhat[i * d + j] * m2[j]);
                        }
                    }
                }
            });
        }
        Op::BatchNormEval {
            x,
            gain,
            inv_std,
            xhat,
            bias,
        } => {
            let d = inv_std.len();
            let gv = &nodes[gain.0].data;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * gv[i % d] * inv_std[i % d];
                }
            });
            accumulate(grads, nodes, *gain, |gg| {
                for i in 0..g.len() {
                    gg[i % d] += g[i] * xhat[i];
                }
            });
            accumulate(grads, nodes, *bias, |gb| {
                for chunk in g.chunks_exact(d) {
                    add_assign(gb, chunk);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let (n, total) = dims2(&node.shape);
            let mut offset = 0;
            for &p in parts {
                let (_, w) = dims2(&nodes[p.0].shape);
                accumulate(grads, nodes, p, |gp| {
                    for i in 0..n {
                        add_assign(
                            &mut gp[i * w..(i + 1) * w],
                            &g[i * total + offset..i * total + offset + w],
                        );
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].data.len();
                accumulate(grads, nodes, p, |gp| add_assign(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::SliceCols(x, start) => {
            let (n, len) = dims2(&node.shape);
            let (_, d) = dims2(&nodes[x.0].shape);
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..n {
                    add_assign(
                        &mut gx[i * d + start..i * d + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            });
        }
        Op::SliceRows(x, start) => {
            let (_, d) = dims2(&node.shape);
            accumulate(grads, nodes, *x, |gx| {
                add_assign(&mut gx[start * d..start * d + g.len()], g);
            });
        }
        Op::GatherRows(x, indices) => {
            let (_, d) = dims2(&node.shape);
            accumulate(grads, nodes, *x, |gx| {
                for (k, &i) in indices.iter().enumerate() {
                    add_assign(&mut gx[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                }
            });
        }
        Op::Transpose(x) => {
            let (r, c) = dims2(&nodes[x.0].shape);
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Dropout(x, mask) => {
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            });
        }
        Op::SegmentMax(x, arg) => {
            let d = *node.shape.last().unwrap_or(&1);
            accumulate(grads, nodes, *x, |gx| {
                for (k, &row) in arg.iter().enumerate() {
                    gx[row * d + k % d] += g[k];
                }
            });
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
        }
        Op::Mean(x) => {
            let n = nodes[x.0].data.len() as f64;
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
        }
        Op::RowNorms(x) => {
            let (_, d) = dims2(&nodes[x.0].shape);
            let xv = &nodes[x.0].data;
            accumulate(grads, nodes, *x, |gx| {
                for (i, &norm) in out.iter().enumerate() {
                    if norm > 0.0 {
                        for j in 0..d {
                            gx[i * d + j] += g[i] * xv[i * d + j] / norm;
                        }
                    }
                }
            });
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(g: &mut Graph, rows: &[&[f64]], grad: bool) -> Var {
        let cols = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let t = Tensor::matrix(rows.len(), cols, data).unwrap();
        if grad {
            g.param(&t)
        } else {
            g.leaf(&t)
        }
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let mut g = Graph::new();
        let i = mat(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]], false);
        let b = mat(&mut g, &[&[3.0, 4.0], &[5.0, 6.0]], false);
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = mat(&mut g, &[&[1.0, 2.0]], true);
        let b = mat(&mut g, &[&[3.0], &[4.0]], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = mat(&mut g, &[&[1.0, 2.0, 3.0]], false);
        let b = mat(&mut g, &[&[1.0], &[2.0]], false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[0.0, 0.0], &[2f64.ln(), 0.0]], false);
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[f64::NAN, 0.0]], false);
        assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[1.0, 3.0], &[5.0, 5.0]], false);
        let gain = g.leaf(&Tensor::vector(vec![1.0, 1.0]).unwrap());
        let bias = g.leaf(&Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn pointwise_relu_layer_example() {
        // w=[[2]], b=[1] on [[3],[-1]] with ReLU → [[7],[0]]
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[3.0], &[-1.0]], false);
        let w = mat(&mut g, &[&[2.0]], false);
        let b = g.leaf(&Tensor::vector(vec![1.0]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let h = g.add_row(h, b).unwrap();
        let y = g.relu(h);
        assert_eq!(g.value(y), &[7.0, 0.0]);
    }

    #[test]
    fn max_over_points_routes_to_first_argmax() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[1.0, 5.0], &[3.0, 2.0], &[3.0, 5.0]], true);
        let m = g.max_over_points(x).unwrap();
        assert_eq!(g.shape(m), &[2]);
        assert_eq!(g.value(m), &[3.0, 5.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(vec![3, 2]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(vec![2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalar(_))));
    }

    #[test]
    fn backward_populates_every_ancestor_when_retaining() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.5, -1.0]).unwrap());
        let t = g.tanh(x);
        let s = g.scale(t, 3.0);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        for v in [x, t, s, loss] {
            assert!(g.grad(v).is_some());
        }

        let mut g = Graph::new();
        g.set_retain_grads(false);
        let x = g.param(&Tensor::vector(vec![0.5, -1.0]).unwrap());
        let t = g.tanh(x);
        let loss = g.sum(t);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(t).is_none());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0; 10_000]).unwrap());
        let y = g.dropout(x, 0.1, false, &mut rng).unwrap();
        assert_eq!(y, x);
        let y = g.dropout(x, 0.1, true, &mut rng).unwrap();
        let mean = g.value(y).iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn batch_norm_reports_population_statistics() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[1.0, 10.0], &[3.0, 10.0]], false);
        let gain = g.leaf(&Tensor::vector(vec![1.0, 1.0]).unwrap());
        let bias = g.leaf(&Tensor::vector(vec![0.0, 0.0]).unwrap());
        let (y, stats) = g.batch_norm(x, gain, bias).unwrap();
        assert_eq!(stats.mean, vec![2.0, 10.0]);
        assert_eq!(stats.var, vec![1.0, 0.0]);
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[2] - 1.0).abs() < 1e-4);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[&[1.0], &[2.0]], true);
        let y = g.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(y), &[2.0, 2.0, 1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
        assert!(g.gather_rows(x, &[2]).is_err());
    }
}
