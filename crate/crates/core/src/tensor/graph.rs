use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvDims};
use super::param::{Gradients, ParamId, ParamStore};
use super::{axis_layout, numel, Result, Tensor, TensorError};
use crate::scalar::Real;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Every differentiable operation the graph can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddBias,
    MatMul,
    Conv2d,
    Conv3d,
    Sigmoid,
    Tanh,
    Softmax,
    Mean,
    Sum,
    MaxGlobal,
    DotAlongChannel,
    BceLoss,
    Concat,
    Select,
    AvgPool,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddBias,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Conv3d,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::MaxGlobal,
        OpKind::DotAlongChannel,
        OpKind::BceLoss,
        OpKind::Concat,
        OpKind::Select,
        OpKind::AvgPool,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddBias => "add_bias",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::MaxGlobal => "max_global",
            OpKind::DotAlongChannel => "dot_along_channel",
            OpKind::BceLoss => "bce_loss",
            OpKind::Concat => "concat",
            OpKind::Select => "select",
            OpKind::AvgPool => "avg_pool",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddBias { x: usize, bias: usize, axis: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv { x: usize, kernel: usize, dims: ConvDims, kind: OpKind },
    Sigmoid(usize),
    Tanh(usize),
    Softmax { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Sum(usize),
    MaxGlobal { x: usize, argmax: usize },
    DotAlongChannel { v: usize, a: usize },
    Bce { pred: usize, target: Vec<T> },
    Concat { inputs: Vec<usize>, axis: usize },
    Select { x: usize, axis: usize, index: usize },
    AvgPool { x: usize, axis: usize, factor: usize },
    Reshape(usize),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv { kind, .. } => *kind,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::MaxGlobal { .. } => OpKind::MaxGlobal,
            Op::DotAlongChannel { .. } => OpKind::DotAlongChannel,
            Op::Bce { .. } => OpKind::BceLoss,
            Op::Concat { .. } => OpKind::Concat,
            Op::Select { .. } => OpKind::Select,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Reshape(..) => OpKind::Reshape,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the tape is already
/// topologically sorted and backward is a single reverse sweep.
pub struct Graph<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, usize)>,
    backward_done: bool,
    corrupted: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            backward_done: false,
            corrupted: None,
        }
    }

    /// Test hook: perturbs the backward rule of `kind` so gradient checks can
    /// be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: Option<OpKind>) {
        self.corrupted = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_unchecked(Op::Leaf, tensor, requires_grad)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf, tensor, false)
    }

    /// Records the current value of a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).value().clone();
        let var = self.push_unchecked(Op::Leaf, value, true);
        self.params.push((id, var.index));
        var
    }

    /// Binds every parameter of `store`; the result is indexed by `ParamId::index`.
    pub fn bind_params(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[self.index(var).expect("variable from another graph")].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Gradient accumulated for `var` by the last backward pass.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        let idx = self.index(var).ok()?;
        self.nodes[idx].grad.as_deref()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::DetachedGraph);
        }
        Ok(var.index)
    }

    fn push_unchecked(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        self.backward_done = false;
        Var {
            graph: self.id,
            index,
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, inputs: &[usize]) -> Result<Var> {
        let kind = op.kind().expect("push is only used for operations");
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    fn dims(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn check_axis(&self, op: &'static str, i: usize, axis: usize) -> Result<()> {
        let rank = self.dims(i).len();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op<T>, a: usize, b: usize, f: impl Fn(T, T) -> T) -> Result<Var> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.dims(a).to_vec();
        self.push(op, shape, data, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape("add", a, b)?;
        self.zip_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape("sub", a, b)?;
        self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape("mul", a, b)?;
        self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let x = self.index(x)?;
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.dims(x).to_vec();
        self.push(Op::Scale(x, c), shape, data, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let x = self.index(x)?;
        let data = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.dims(x).to_vec();
        self.push(Op::AddScalar(x), shape, data, &[x])
    }

    /// `1 - x`, composed from scale and add_scalar.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (x, b) = (self.index(x)?, self.index(bias)?);
        self.check_axis("add_bias", x, axis)?;
        let (outer, len, inner) = axis_layout(self.dims(x), axis);
        if self.dims(b) != [len] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.dims(x).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        let mut data = self.data(x).to_vec();
        let bias = self.data(b);
        for o in 0..outer {
            for (c, &bv) in bias.iter().enumerate() {
                let start = (o * len + c) * inner;
                for v in &mut data[start..start + inner] {
                    *v += bv;
                }
            }
        }
        let shape = self.dims(x).to_vec();
        self.push(Op::AddBias { x, bias: b, axis }, shape, data, &[x, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`, or matrix-vector `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, out_shape) = match sb.as_slice() {
            [kb, n] if *kb == k => (*n, vec![m, *n]),
            [kb] if *kb == k => (1, vec![m]),
            _ => return Err(mismatch()),
        };
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push(Op::MatMul { a, b, m, k, n }, out_shape, data, &[a, b])
    }

    /// Stride-1 'same' convolution: `[Cin, H, W]` with kernel `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xi, ki) = (self.index(x)?, self.index(kernel)?);
        let (sx, sk) = (self.dims(xi).to_vec(), self.dims(ki).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let dims = ConvDims {
            cin: sx[0],
            cout: sk[0],
            d: 1,
            h: sx[1],
            w: sx[2],
            kd: 1,
            kh: sk[2],
            kw: sk[3],
        };
        self.conv(xi, ki, dims, OpKind::Conv2d, vec![sk[0], sx[1], sx[2]])
    }

    /// Stride-1 'same' convolution: `[Cin, D, H, W]` with kernel `[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xi, ki) = (self.index(x)?, self.index(kernel)?);
        let (sx, sk) = (self.dims(xi).to_vec(), self.dims(ki).to_vec());
        if sx.len() != 4 || sk.len() != 5 || sk[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: sx,
                rhs: sk,
            });
        }
        let dims = ConvDims {
            cin: sx[0],
            cout: sk[0],
            d: sx[1],
            h: sx[2],
            w: sx[3],
            kd: sk[2],
            kh: sk[3],
            kw: sk[4],
        };
        self.conv(xi, ki, dims, OpKind::Conv3d, vec![sk[0], sx[1], sx[2], sx[3]])
    }

    fn conv(&mut self, x: usize, kernel: usize, dims: ConvDims, kind: OpKind, shape: Vec<usize>) -> Result<Var> {
        if dims.kd % 2 == 0 || dims.kh % 2 == 0 || dims.kw % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: kind.name(),
                msg: "'same' padding needs odd kernel sizes".into(),
            });
        }
        let data = kernels::conv_forward(self.data(x), self.data(kernel), &dims);
        self.push(Op::Conv { x, kernel, dims, kind }, shape, data, &[x, kernel])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let data = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.dims(x).to_vec();
        self.push(Op::Sigmoid(x), shape, data, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let data = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.dims(x).to_vec();
        self.push(Op::Tanh(x), shape, data, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = axis_layout(self.dims(x), axis);
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let shape = self.dims(x).to_vec();
        self.push(Op::Softmax { x, axis }, shape, data, &[x])
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis("mean", x, axis)?;
        let (outer, len, inner) = axis_layout(self.dims(x), axis);
        let src = self.data(x);
        let scale = T::one() / T::lit(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for d in &mut data {
            *d *= scale;
        }
        let mut shape = self.dims(x).to_vec();
        shape.remove(axis);
        self.push(Op::Mean { x, axis }, shape, data, &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let total = self.data(x).iter().copied().sum();
        self.push(Op::Sum(x), Vec::new(), vec![total], &[x])
    }

    /// Global maximum. Ties resolve to the first maximal element in row-major order.
    pub fn max_global(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let (argmax, max) = first_argmax(self.data(x));
        self.push(Op::MaxGlobal { x, argmax }, Vec::new(), vec![max], &[x])
    }

    /// Per-cell dot products of a `[D, I]` grid with a `[D]` vector, giving `[I]`.
    pub fn dot_along_channel(&mut self, grid: Var, vector: Var) -> Result<Var> {
        let (v, a) = (self.index(grid)?, self.index(vector)?);
        let (sv, sa) = (self.dims(v).to_vec(), self.dims(a).to_vec());
        if sv.len() != 2 || sa != [sv[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "dot_along_channel",
                lhs: sv,
                rhs: sa,
            });
        }
        let (d, cells) = (sv[0], sv[1]);
        let (vd, ad) = (self.data(v), self.data(a));
        let mut data = vec![T::zero(); cells];
        for c in 0..d {
            let w = ad[c];
            for (o, &x) in data.iter_mut().zip(&vd[c * cells..(c + 1) * cells]) {
                *o += w * x;
            }
        }
        self.push(Op::DotAlongChannel { v, a }, vec![cells], data, &[v, a])
    }

    /// Summed binary cross-entropy `-sum(y ln p + (1 - y) ln(1 - p))`.
    ///
    /// Predictions must lie strictly inside (0, 1); targets must be 0 or 1.
    pub fn bce_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.index(pred)?;
        if self.data(p).len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                lhs: self.dims(p).to_vec(),
                rhs: vec![target.len()],
            });
        }
        if let Some(&y) = target.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::InvalidArgument {
                op: "bce_loss",
                msg: format!("target {y} is not 0 or 1"),
            });
        }
        let mut total = T::zero();
        for (&pv, &y) in self.data(p).iter().zip(target) {
            if !(pv > T::zero() && pv < T::one()) {
                return Err(TensorError::PredictionOutOfRange { value: pv.as_f64() });
            }
            total -= if y == T::one() { pv.ln() } else { (T::one() - pv).ln() };
        }
        let op = Op::Bce {
            pred: p,
            target: target.to_vec(),
        };
        self.push(op, Vec::new(), vec![total], &[p])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.dims(first).to_vec();
        for &i in &idx[1..] {
            let s = self.dims(i);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_layout(&base, axis);
        let total_len: usize = idx.iter().map(|&i| self.dims(i)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for &i in &idx {
                let len = self.dims(i)[axis];
                data.extend_from_slice(&self.data(i)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        self.push(Op::Concat { inputs: idx.clone(), axis }, shape, data, &idx)
    }

    /// Slice at `index` along `axis`; the axis is removed from the shape.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis("select", x, axis)?;
        let (outer, len, inner) = axis_layout(self.dims(x), axis);
        if index >= len {
            return Err(TensorError::InvalidArgument {
                op: "select",
                msg: format!("index {index} out of range for axis of length {len}"),
            });
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
        let mut shape = self.dims(x).to_vec();
        shape.remove(axis);
        self.push(Op::Select { x, axis, index }, shape, data, &[x])
    }

    /// Non-overlapping average pooling with window and stride `factor` along `axis`.
    pub fn avg_pool(&mut self, x: Var, axis: usize, factor: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis("avg_pool", x, axis)?;
        let (outer, len, inner) = axis_layout(self.dims(x), axis);
        if factor == 0 || len % factor != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool",
                msg: format!("factor {factor} does not divide axis length {len}"),
            });
        }
        let out_len = len / factor;
        let scale = T::one() / T::lit(factor as f64);
        let src = self.data(x);
        let mut data = vec![T::zero(); outer * out_len * inner];
        for o in 0..outer {
            for j in 0..len {
                let dst = (o * out_len + j / factor) * inner;
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &v) in data[dst..dst + inner].iter_mut().zip(row) {
                    *d += v * scale;
                }
            }
        }
        let mut shape = self.dims(x).to_vec();
        shape[axis] = out_len;
        self.push(Op::AvgPool { x, axis, factor }, shape, data, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.index(x)?;
        if numel(shape) != self.data(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.dims(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), data, &[x])
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every bound
    /// parameter. A graph supports one backward pass per forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRan);
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[root].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root].grad = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let needs = |j: usize| before[j].requires_grad;
            let mut contributions = input_grads(&node.op, &node.value, grad, before, &needs);
            if let (Some(bad), Some(kind)) = (self.corrupted, node.op.kind()) {
                if bad == kind {
                    for (_, g) in &mut contributions {
                        for v in g.iter_mut() {
                            *v = *v * T::lit(1.5) + T::lit(1e-3);
                        }
                    }
                }
            }
            for (j, g) in contributions {
                if !before[j].requires_grad {
                    continue;
                }
                match &mut before[j].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.backward_done = true;

        let mut grads = Gradients::new();
        for &(id, idx) in &self.params {
            let g = self.nodes[idx]
                .grad
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[idx].value.numel()]);
            grads.accumulate(id, &g);
        }
        Ok(grads)
    }
}

pub(crate) fn first_argmax<T: Real>(data: &[T]) -> (usize, T) {
    let mut best = (0, data[0]);
    for (i, &v) in data.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Backward rule of each op: gradients flowing to each input, for inputs that need them.
fn input_grads<T: Real>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    nodes: &[Node<T>],
    needs: &dyn Fn(usize) -> bool,
) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| nodes[i].value.data();
    let shape = |i: usize| nodes[i].value.shape();
    let y = out.data();
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.to_vec()));
        }
        Op::Sub(a, b) => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.iter().map(|&v| -v).collect()));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                res.push((*a, g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect()));
            }
            if needs(*b) {
                res.push((*b, g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect()));
            }
        }
        Op::Scale(x, c) => res.push((*x, g.iter().map(|&v| v * *c).collect())),
        Op::AddScalar(x) | Op::Reshape(x) => res.push((*x, g.to_vec())),
        Op::AddBias { x, bias, axis } => {
            res.push((*x, g.to_vec()));
            if needs(*bias) {
                let (outer, len, inner) = axis_layout(shape(*x), *axis);
                let mut gb = vec![T::zero(); len];
                for o in 0..outer {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let start = (o * len + c) * inner;
                        *acc += g[start..start + inner].iter().copied().sum::<T>();
                    }
                }
                res.push((*bias, gb));
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g, *m, *k, *n);
            res.push((*a, ga));
            res.push((*b, gb));
        }
        Op::Conv { x, kernel, dims, .. } => {
            if needs(*x) {
                res.push((*x, kernels::conv_backward_input(val(*kernel), g, dims)));
            }
            if needs(*kernel) {
                res.push((*kernel, kernels::conv_backward_kernel(val(*x), g, dims)));
            }
        }
        Op::Sigmoid(x) => res.push((
            *x,
            g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect(),
        )),
        Op::Tanh(x) => res.push((
            *x,
            g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect(),
        )),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_layout(out.shape(), *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            res.push((*x, gx));
        }
        Op::Mean { x, axis } => {
            let (outer, len, inner) = axis_layout(shape(*x), *axis);
            let scale = T::one() / T::lit(len as f64);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = gv * scale;
                    }
                }
            }
            res.push((*x, gx));
        }
        Op::Sum(x) => res.push((*x, vec![g[0]; val(*x).len()])),
        Op::MaxGlobal { x, argmax } => {
            let mut gx = vec![T::zero(); val(*x).len()];
            gx[*argmax] = g[0];
            res.push((*x, gx));
        }
        Op::DotAlongChannel { v, a } => {
            let (d, cells) = (shape(*v)[0], shape(*v)[1]);
            let (vd, ad) = (val(*v), val(*a));
            if needs(*v) {
                let mut gv = vec![T::zero(); d * cells];
                for c in 0..d {
                    for (o, &gc) in gv[c * cells..(c + 1) * cells].iter_mut().zip(g) {
                        *o = gc * ad[c];
                    }
                }
                res.push((*v, gv));
            }
            if needs(*a) {
                let ga = (0..d)
                    .map(|c| vd[c * cells..(c + 1) * cells].iter().zip(g).map(|(&x, &gc)| x * gc).sum())
                    .collect();
                res.push((*a, ga));
            }
        }
        Op::Bce { pred, target } => {
            let gp = val(*pred)
                .iter()
                .zip(target)
                .map(|(&p, &t)| {
                    let d = if t == T::one() { -T::one() / p } else { T::one() / (T::one() - p) };
                    g[0] * d
                })
                .collect();
            res.push((*pred, gp));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_layout(out.shape(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let len = shape(i)[*axis];
                let mut gi = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    gi.extend_from_slice(&g[start..start + len * inner]);
                }
                res.push((i, gi));
                offset += len;
            }
        }
        Op::Select { x, axis, index } => {
            let (outer, len, inner) = axis_layout(shape(*x), *axis);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let start = (o * len + index) * inner;
                gx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
            res.push((*x, gx));
        }
        Op::AvgPool { x, axis, factor } => {
            let (outer, len, inner) = axis_layout(shape(*x), *axis);
            let out_len = len / factor;
            let scale = T::one() / T::lit(*factor as f64);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * out_len + j / factor) * inner;
                    let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, &gv) in dst.iter_mut().zip(&g[src..src + inner]) {
                        *d = gv * scale;
                    }
                }
            }
            res.push((*x, gx));
        }
    }
    res
}
