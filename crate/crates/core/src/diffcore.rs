//! Reverse-mode differentiation over a small set of dense `f64` primitives.
//!
//! A [`Graph`] is an append-only tape. Every operation appends a node that
//! stores its forward value and the ids of its inputs; [`Graph::backward`]
//! walks the tape once in reverse. Nodes whose inputs never require a
//! gradient are marked and skipped during the reverse sweep, so frozen
//! branches of a model cost nothing beyond their forward pass.
//!
//! Broadcasting is limited to scalar-with-tensor. Row broadcasts (bias adds,
//! class tokens repeated over a batch) are expressed as a matmul against a
//! column of ones, see [`Graph::repeat_rows`].

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Lower bound applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("log: non-positive input {value} at flat index {index}")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `[rows, cols]` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(DiffError::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0].max(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Log {
        a: Var,
    },
    ClampMin {
        a: Var,
        min: f64,
    },
    Sum {
        a: Var,
        axis: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    SumAll {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Append-only operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the graph's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(&var.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// `[outer, len, inner]` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover every strided index
    // touched for the given m, k, n; `c` is a dense m×n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Leaf tensor; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Matrix product of two rank-2 tensors, or a batched product of two
    /// rank-3 tensors sharing their leading dimension. With `trans_b` the
    /// last two axes of `b` are transposed first.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (groups, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(mismatch()),
        };
        if sb.len() != sa.len() || (sa.len() == 3 && sb[0] != groups) {
            return Err(mismatch());
        }
        let (kb, n) = {
            let r = sb.len();
            if trans_b {
                (sb[r - 1], sb[r - 2])
            } else {
                (sb[r - 2], sb[r - 1])
            }
        };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    k as isize,
                    1,
                    &bv[g * k * n..(g + 1) * k * n],
                    rsb,
                    csb,
                    &mut out[g * m * n..(g + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 3 {
            vec![groups, m, n]
        } else {
            vec![m, n]
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul { a, b, trans_b },
            needs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((a, b));
        }
        // Scalar broadcast: normalise so the scalar sits on the right.
        if self.value(b).numel() == 1 {
            return Ok((a, b));
        }
        if self.value(a).numel() == 1 {
            return Ok((b, a));
        }
        Err(DiffError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_shapes("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<f64> = if av.shape == bv.shape {
            av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect()
        } else {
            let s = bv.data[0];
            av.data.iter().map(|x| x + s).collect()
        };
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_shapes("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<f64> = if av.shape == bv.shape {
            av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect()
        } else {
            let s = bv.data[0];
            av.data.iter().map(|x| x * s).collect()
        };
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| x * factor).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale { a, factor }, needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let width = *av.shape.last().ok_or_else(|| DiffError::InvalidArgument {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut data = av.data.clone();
        if width > 0 {
            for row in data.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let shape = av.shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { a }, needs))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`
    /// vectors of that axis' length.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape.last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.value(p).numel() != width || width == 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.numel() / width;
        let mut out = vec![0.0; xv.numel()];
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = rstd;
            for j in 0..width {
                let h = (row[j] - mean) * rstd;
                normalized[r * width + j] = h;
                out[r * width + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| gelu_parts(x).0).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::Gelu { a }, needs)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some((index, &value)) = av.data.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(DiffError::NonPositiveLog { index, value });
        }
        let data = av.data.iter().map(|x| x.ln()).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Log { a }, needs))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x.max(min)).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::ClampMin { a, min }, needs)
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(DiffError::InvalidArgument {
                op: if mean { "mean" } else { "sum" },
                msg: format!("axis {axis} out of range for shape {:?}", av.shape),
            });
        }
        let (outer, len, inner) = split_axis(&av.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean && len > 0 {
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = av.shape.clone();
        shape.remove(axis);
        let needs = self.needs(a);
        let op = if mean {
            Op::Mean { a, axis }
        } else {
            Op::Sum { a, axis }
        };
        Ok(self.push(Tensor { shape, data }, op, needs))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| DiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape[axis];
                data.extend_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() || start > end || end > av.shape[axis] {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{end} on axis {axis} of shape {:?}",
                    av.shape
                ),
            });
        }
        let (outer, len, inner) = split_axis(&av.shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&av.data[base..base + width * inner]);
        }
        let mut shape = av.shape.clone();
        shape[axis] = width;
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice { a, axis, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Repeats a single row (`[d]` or `[1, d]`) `n` times as `[n, d]`,
    /// recorded as `ones[n, 1] · row[1, d]`. The forward value is a plain
    /// copy, which equals that product exactly.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let width = self.value(row).numel();
        let row2 = if self.shape(row) == [1, width] {
            row
        } else {
            self.reshape(row, &[1, width])?
        };
        let ones = self.constant(Tensor::filled(&[n, 1], 1.0));
        let data = self.value(row2).data().repeat(n);
        let needs = self.needs(row2);
        Ok(self.push(
            Tensor {
                shape: vec![n, width],
                data,
            },
            Op::MatMul {
                a: ones,
                b: row2,
                trans_b: false,
            },
            needs,
        ))
    }

    /// `x[n, k] · w[k, m] + bias[m]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let b = self.repeat_rows(bias, rows)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (a, b, trans_b) = (*a, *b, *trans_b);
                    let sa = self.shape(a);
                    let (groups, m, k) = if sa.len() == 3 {
                        (sa[0], sa[1], sa[2])
                    } else {
                        (1, sa[0], sa[1])
                    };
                    let n = *node.value.shape.last().unwrap();
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    if self.needs(a) {
                        let ga = acc(&mut grads, a, groups * m * k);
                        // dA = dC · op(B)^T
                        let (rsb, csb) = if trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        for g in 0..groups {
                            gemm(
                                m,
                                n,
                                k,
                                &gout[g * m * n..(g + 1) * m * n],
                                n as isize,
                                1,
                                &bv[g * k * n..(g + 1) * k * n],
                                rsb,
                                csb,
                                &mut ga[g * m * k..(g + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                    if self.needs(b) {
                        let gb = acc(&mut grads, b, groups * k * n);
                        for g in 0..groups {
                            let gc = &gout[g * m * n..(g + 1) * m * n];
                            let ag = &av[g * m * k..(g + 1) * m * k];
                            let dst = &mut gb[g * k * n..(g + 1) * k * n];
                            if trans_b {
                                // B is [n, k]: dB = dC^T · A
                                gemm(n, m, k, gc, 1, n as isize, ag, k as isize, 1, dst, 1.0);
                            } else {
                                // dB = A^T · dC
                                gemm(k, m, n, ag, 1, k as isize, gc, n as isize, 1, dst, 1.0);
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if !self.needs(v) {
                            continue;
                        }
                        let n = self.value(v).numel();
                        let g = acc(&mut grads, v, n);
                        if n == gout.len() {
                            g.iter_mut().zip(&gout).for_each(|(d, s)| *d += s);
                        } else {
                            g[0] += gout.iter().sum::<f64>();
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    let scalar_b = bv.len() != av.len();
                    if self.needs(a) {
                        let g = acc(&mut grads, a, av.len());
                        for i in 0..gout.len() {
                            g[i] += gout[i] * if scalar_b { bv[0] } else { bv[i] };
                        }
                    }
                    if self.needs(b) {
                        let g = acc(&mut grads, b, bv.len());
                        if scalar_b {
                            g[0] += gout.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                        } else {
                            for i in 0..gout.len() {
                                g[i] += gout[i] * av[i];
                            }
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let g = acc(&mut grads, *a, gout.len());
                    g.iter_mut().zip(&gout).for_each(|(d, s)| *d += s * factor);
                }
                Op::Softmax { a } => {
                    let y = &node.value.data;
                    let width = *node.value.shape.last().unwrap();
                    let g = acc(&mut grads, *a, y.len());
                    for r in 0..y.len() / width.max(1) {
                        let ys = &y[r * width..(r + 1) * width];
                        let gs = &gout[r * width..(r + 1) * width];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            g[r * width + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let width = *node.value.shape.last().unwrap();
                    let rows = inv_std.len();
                    let gv = self.value(*gain).data();
                    if self.needs(*gain) {
                        let g = acc(&mut grads, *gain, width);
                        for r in 0..rows {
                            for j in 0..width {
                                g[j] += gout[r * width + j] * normalized[r * width + j];
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let g = acc(&mut grads, *bias, width);
                        for r in 0..rows {
                            for j in 0..width {
                                g[j] += gout[r * width + j];
                            }
                        }
                    }
                    if self.needs(*x) {
                        let g = acc(&mut grads, *x, rows * width);
                        let inv_w = 1.0 / width as f64;
                        let mut dh = vec![0.0; width];
                        for r in 0..rows {
                            let hs = &normalized[r * width..(r + 1) * width];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..width {
                                dh[j] = gout[r * width + j] * gv[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * hs[j];
                            }
                            mean_dh *= inv_w;
                            mean_dh_h *= inv_w;
                            for j in 0..width {
                                g[r * width + j] +=
                                    inv_std[r] * (dh[j] - mean_dh - hs[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    let xv = self.value(*a).data();
                    let g = acc(&mut grads, *a, xv.len());
                    for i in 0..xv.len() {
                        g[i] += gout[i] * gelu_parts(xv[i]).1;
                    }
                }
                Op::Log { a } => {
                    let xv = self.value(*a).data();
                    let g = acc(&mut grads, *a, xv.len());
                    for i in 0..xv.len() {
                        g[i] += gout[i] / xv[i];
                    }
                }
                Op::ClampMin { a, min } => {
                    let xv = self.value(*a).data();
                    let g = acc(&mut grads, *a, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] >= *min {
                            g[i] += gout[i];
                        }
                    }
                }
                Op::Sum { a, axis } | Op::Mean { a, axis } => {
                    let shape = self.shape(*a);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let factor = match node.op {
                        Op::Mean { .. } if len > 0 => 1.0 / len as f64,
                        _ => 1.0,
                    };
                    let g = acc(&mut grads, *a, outer * len * inner);
                    for o in 0..outer {
                        let src = &gout[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * factor;
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    let n = self.value(*a).numel();
                    let g = acc(&mut grads, *a, n);
                    g.iter_mut().for_each(|d| *d += gout[0]);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis];
                        if self.needs(v) {
                            let g = acc(&mut grads, v, outer * len * inner);
                            for o in 0..outer {
                                let src = &gout[(o * total + offset) * inner
                                    ..(o * total + offset + len) * inner];
                                let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let shape = self.shape(*a);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let width = node.value.shape[*axis];
                    let g = acc(&mut grads, *a, outer * len * inner);
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        let src = &gout[o * width * inner..(o + 1) * width * inner];
                        g[base..base + width * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                Op::Reshape { a } => {
                    let g = acc(&mut grads, *a, gout.len());
                    g.iter_mut().zip(&gout).for_each(|(d, s)| *d += s);
                }
            }
        }

        let mut by_node = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_node.insert(
                    id,
                    Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    },
                );
            }
        }
        Ok(Gradients { by_node })
    }
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives the graph and one leaf per entry of `params` and must
/// return a scalar loss. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(params: &[Tensor], epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(DiffError::InvalidArgument {
            op: "finite_difference_check",
            msg: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    let tape_len = graph.len();
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_capacity(tape_len);
        let vs: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.value(l).item())
    };

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .expect("every param leaf has a gradient")
            .data()
            .to_vec();
        for j in 0..work[pi].numel() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + epsilon;
            let up = evaluate(&work)?;
            work[pi].data[j] = orig - epsilon;
            let down = evaluate(&work)?;
            work[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
