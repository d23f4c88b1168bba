use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeometry};
use super::{TensorError, LAYER_NORM_EPS, NORM_EPS};

type Result<T> = std::result::Result<T, TensorError>;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand is a vector matching the trailing axis.
    Row,
    /// Right operand holds a single value.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Abs,
    Log,
    Exp,
    Sigmoid,
    Gelu,
}

pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum(Var),
    Mean(Var),
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    MeanPoolTime(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    Reshape(Var),
    Pick {
        x: Var,
        index: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Cosine { a, b } | Op::Matmul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::Slice { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Transpose(x)
            | Op::MeanPoolTime(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv1d { x, w, .. } => vec![*x, *w],
        }
    }
}

/// Stride, padding and grouping for [`Graph::conv1d_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    pub fn valid(stride: usize) -> Self {
        Conv1dSpec {
            stride,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        }
    }

    /// Padding that keeps the output length equal to the input length at
    /// stride 1.
    pub fn same(kernel: usize, groups: usize) -> Self {
        let total = kernel - 1;
        Conv1dSpec {
            stride: 1,
            pad_left: total / 2 + total % 2,
            pad_right: total / 2,
            groups,
        }
    }
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `outer × axis × inner` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = if sa == sb {
            Broadcast::Same
        } else if sb.len() == 1 && !sa.is_empty() && sb[0] == last_axis(&sa) {
            Broadcast::Row
        } else if sb.is_empty() {
            Broadcast::Scalar
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let width = bv.len();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = match bcast {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % width]))
                .collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        };
        self.push(name, sa, data, Op::Binary { kind, a, b, bcast })
    }

    /// Elementwise `a + b`; `b` may also be a trailing-axis vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        self.push("scale", shape, data, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x))
    }

    /// Elementwise mean of equally shaped values, built from `add` and `scale`.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(TensorError::InvalidArgument {
                op: "average",
                msg: "no inputs".into(),
            });
        };
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        if xs.len() == 1 {
            return Ok(acc);
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(x))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Abs => ("abs", f64::abs),
            UnaryKind::Log => ("log", f64::ln),
            UnaryKind::Exp => ("exp", f64::exp),
            UnaryKind::Sigmoid => ("sigmoid", sigmoid),
            UnaryKind::Gelu => ("gelu", gelu),
        };
        if kind == UnaryKind::Log && self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { op: name });
        }
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(name, shape, data, Op::Unary { kind, x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    fn softmax_rows(&self, x: Var) -> (Vec<usize>, Vec<f64>, usize) {
        let shape = self.shape(x).to_vec();
        let d = last_axis(&shape);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - max).exp();
                z += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= z;
            }
        }
        (shape, out, d)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (shape, out, _) = self.softmax_rows(x);
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_axis(&shape);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = v - lse;
            }
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_axis(&shape);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape,
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::OutOfRange {
                op: "concat",
                what: "axis",
                index: axis,
                extent: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::OutOfRange {
                op: "slice",
                what: "axis",
                index: axis,
                extent: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::OutOfRange {
                op: "slice",
                what: "end",
                index: start + len,
                extent: shape[axis],
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "slice",
            out_shape,
            out,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        )
    }

    /// Mean over the time (first) axis of a `T×D` tensor, giving `D`.
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "mean_pool_time",
                expected: 2,
                shape,
            });
        }
        let (t, d) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; d];
        for row in xv.chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        self.push("mean_pool_time", vec![d], out, Op::MeanPoolTime(x))
    }

    /// Scales each last-axis vector to unit L2 norm, `x / max(‖x‖, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_axis(&shape);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let n = kernels::dot(row, row).sqrt();
            norms.push(n);
            let denom = n.max(NORM_EPS);
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = v / denom;
            }
        }
        self.push("l2_normalize", shape, out, Op::L2Normalize { x, norms })
    }

    /// Row-wise cosine similarity over the last axis.
    ///
    /// Rows where either norm is below 1e-12 yield 0 with zero gradient.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: sa,
                rhs: sb,
            });
        }
        let d = last_axis(&sa);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = av
            .chunks(d)
            .zip(bv.chunks(d))
            .map(|(x, y)| {
                let (nx, ny) = (kernels::dot(x, x).sqrt(), kernels::dot(y, y).sqrt());
                if nx < NORM_EPS || ny < NORM_EPS {
                    0.0
                } else {
                    kernels::dot(x, y) / (nx * ny)
                }
            })
            .collect();
        let out_shape = sa[..sa.len() - 1].to_vec();
        self.push("cosine_similarity", out_shape, out, Op::Cosine { a, b })
    }

    /// Matrix product of `M×K` and `K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::Matmul { a, b })
    }

    /// Valid (unpadded) cross-correlation of `x[C_in×T]` with `w[C_out×C_in×k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.conv1d_with(x, w, Conv1dSpec::valid(stride))
    }

    /// Cross-correlation with explicit padding and channel groups.
    /// `w` has shape `C_out × (C_in/groups) × k`.
    pub fn conv1d_with(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 2 || sw.len() != 3 {
            return Err(mismatch());
        }
        if spec.stride == 0 || spec.groups == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                msg: "stride and groups must be positive".into(),
            });
        }
        let (cin, t) = (sx[0], sx[1]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
            return Err(mismatch());
        }
        let geo = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            groups: spec.groups,
            kernel: k,
            stride: spec.stride,
            pad_left: spec.pad_left,
            pad_right: spec.pad_right,
            in_len: t,
        };
        let t_out = geo.out_len().ok_or(TensorError::InputTooShort {
            len: geo.padded_len(),
            kernel: k,
        })?;
        let mut out = vec![0.0; cout * t_out];
        kernels::conv1d_acc(&geo, self.value(x).data(), self.value(w).data(), &mut out);
        self.push("conv1d", vec![cout, t_out], out, Op::Conv1d { x, w, geo })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let from = self.shape(x).to_vec();
        if shape.contains(&0) || shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: from,
                rhs: shape,
            });
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(x))
    }

    /// Selects one element by flat row-major index, giving a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(TensorError::OutOfRange {
                op: "pick",
                what: "index",
                index,
                extent: n,
            });
        }
        let v = self.value(x).data()[index];
        self.push("pick", vec![], vec![v], Op::Pick { x, index })
    }

    /// Gradient slot of `v`, zero-initialized on first use; `None` if `v`
    /// does not take part in backward.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub(crate) fn backward_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let width = bv.len();
                let b_at = |i: usize| match bcast {
                    Broadcast::Same => bv[i],
                    Broadcast::Row => bv[i % width],
                    Broadcast::Scalar => bv[0],
                };
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * b_at(i),
                        };
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let contrib = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i],
                        };
                        let j = match bcast {
                            Broadcast::Same => i,
                            Broadcast::Row => i % width,
                            Broadcast::Scalar => 0,
                        };
                        db[j] += contrib;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = g[0] / dx.len() as f64;
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..dx.len() {
                        let local = match kind {
                            UnaryKind::Abs => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else if xv[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Log => 1.0 / xv[i],
                            UnaryKind::Exp => y[i],
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Gelu => gelu_grad(xv[i]),
                        };
                        dx[i] += g[i] * local;
                    }
                }
            }
            Op::Softmax(x) => {
                let d = last_axis(node.value.shape());
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let s = kernels::dot(gr, yr);
                        for j in 0..d {
                            dxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = last_axis(node.value.shape());
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            dxr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = last_axis(node.value.shape());
                let gv = self.value(*gain).data();
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = kernels::dot(&dh, hr) / d as f64;
                        for j in 0..d {
                            dxr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (c, r) = (s[0], s[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(dv) = self.slot(grads, v) {
                        let block = len * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..block];
                            for (d, &s) in dv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    let block = len * inner;
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        for (d, &s) in dx[base..base + block].iter_mut().zip(&g[o * block..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MeanPoolTime(x) => {
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for row in dx.chunks_mut(d) {
                        for (r, &gi) in row.iter_mut().zip(g) {
                            *r += gi / t as f64;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = last_axis(node.value.shape());
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, ((dxr, gr), yr)) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).enumerate()
                    {
                        let n = norms[r];
                        if n > NORM_EPS {
                            let gy = kernels::dot(gr, yr);
                            for j in 0..d {
                                dxr[j] += (gr[j] - yr[j] * gy) / n;
                            }
                        } else {
                            for j in 0..d {
                                dxr[j] += gr[j] / NORM_EPS;
                            }
                        }
                    }
                }
            }
            Op::Cosine { a, b } => {
                let d = last_axis(self.shape(*a));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                for (target, other, first) in [(*a, bv, av), (*b, av, bv)] {
                    if let Some(dt) = self.slot(grads, target) {
                        for (r, dtr) in dt.chunks_mut(d).enumerate() {
                            let t_row = &first[r * d..(r + 1) * d];
                            let o_row = &other[r * d..(r + 1) * d];
                            let nt = kernels::dot(t_row, t_row).sqrt();
                            let no = kernels::dot(o_row, o_row).sqrt();
                            if nt < NORM_EPS || no < NORM_EPS {
                                continue;
                            }
                            let c = y[r];
                            for j in 0..d {
                                dtr[j] += g[r] * (o_row[j] / (nt * no) - c * t_row[j] / (nt * nt));
                            }
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, bv, da, m, k, n);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av, g, db, m, k, n);
                }
            }
            Op::Conv1d { x, w, geo } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                // Weight gradient first, then input, so both slots are never
                // borrowed at once.
                if let Some(dw) = self.slot(grads, *w) {
                    kernels::conv1d_backward_acc(geo, xv, wv, g, None, Some(dw));
                }
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::conv1d_backward_acc(geo, xv, wv, g, Some(dx), None);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Pick { x, index } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx[*index] += g[0];
                }
            }
        }
        Ok(())
    }
}
