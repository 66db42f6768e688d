use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The model-building primitives, addressable by value so that test suites
/// can iterate over them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n]`
    MatMul,
    /// NCHW input, OIHW kernel.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Add,
    Sub,
    Scale(f64),
    Relu,
    /// `[N, ...] -> [N, prod(...)]`
    Flatten,
    /// Non-overlapping `k x k` windows over NCHW input.
    AvgPool2d {
        k: usize,
    },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        gy: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: TensorId,
        gy: TensorId,
        stride: usize,
        pad: usize,
    },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, T),
    MulScalar(TensorId, TensorId),
    BiasAdd(TensorId, TensorId),
    ChannelSum(TensorId),
    Relu(TensorId),
    Reshape(TensorId),
    AvgPool {
        x: TensorId,
        k: usize,
    },
    AvgPoolAdjoint {
        g: TensorId,
        k: usize,
    },
    Sum(TensorId),
    Softmax(TensorId),
    RowSum(TensorId),
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Arc<[usize]>,
    },
    RowCosineDistance {
        a: TensorId,
        target: Arc<[T]>,
    },
    CosineDistance {
        inputs: Arc<[TensorId]>,
        targets: Arc<[Vec<T>]>,
    },
    TotalVariation(TensorId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::BiasAdd(..) => "bias_add",
            Op::ChannelSum(..) => "channel_sum",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::AvgPool { .. } => "avgpool2d",
            Op::AvgPoolAdjoint { .. } => "avgpool2d_adjoint",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::RowSum(..) => "row_sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::RowCosineDistance { .. } => "row_cosine_distance",
            Op::CosineDistance { .. } => "cosine_distance",
            Op::TotalVariation(..) => "total_variation",
        }
    }

    /// Objective-level ops whose backward rule is computed numerically and
    /// therefore cannot be differentiated a second time.
    fn first_order_only(&self) -> bool {
        matches!(
            self,
            Op::RowCosineDistance { .. } | Op::CosineDistance { .. } | Op::TotalVariation(..)
        )
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Arena of tensors plus the record of operations that produced them.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    no_grad: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            no_grad: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a graph input; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> TensorId {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Copies `t` into the graph as a differentiable input.
    pub fn param(&mut self, t: &Tensor<T>) -> TensorId {
        let mut v = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        v.requires_grad = true;
        self.leaf(v)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data)?))
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn item(&self, id: TensorId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[TensorId],
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = !self.no_grad && inputs.iter().any(|&i| self.requires_grad(i));
        let mut value = Tensor::new(shape, data).expect("kernel output matches shape");
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        let want = match prim {
            Primitive::MatMul | Primitive::Conv2d { .. } | Primitive::Add | Primitive::Sub => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(invalid(
                "apply",
                format!("{prim:?} takes {want} inputs, got {}", inputs.len()),
            ));
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Conv2d { stride, pad } => self.conv2d(inputs[0], inputs[1], stride, pad),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Scale(c) => self.scale(inputs[0], T::from_f64(c)),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Flatten => self.flatten(inputs[0]),
            Primitive::AvgPool2d { k } => self.avgpool2d(inputs[0], k),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid(
                "transpose",
                format!("expected a matrix, got shape {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.data(a), r, c);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(mismatch(op, x, w));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be positive"));
        }
        if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
            return Err(invalid(
                op,
                format!("kernel {w:?} larger than padded input {x:?}"),
            ));
        }
        Ok(ConvGeom {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            in_h: x[2],
            in_w: x[3],
            k_h: w[2],
            k_w: w[3],
            stride,
            pad,
        })
    }

    /// 2-D cross-correlation: input `[N, C, H, W]`, kernel `[O, C, KH, KW]`,
    /// output `[N, O, (H + 2p - KH) / s + 1, (W + 2p - KW) / s + 1]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let g = self.conv_geom("conv2d", self.shape(x), self.shape(w), stride, pad)?;
        let out = kernels::conv2d(self.data(x), self.data(w), &g);
        let shape = vec![g.batch, g.out_ch, g.out_h(), g.out_w()];
        Ok(self.push(shape, out, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// Gradient of [`Graph::conv2d`] with respect to its input, given the
    /// upstream gradient `gy` and the input's spatial size.
    pub fn conv2d_input_grad(
        &mut self,
        gy: TensorId,
        w: TensorId,
        in_hw: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (sy, sw) = (self.shape(gy).to_vec(), self.shape(w).to_vec());
        if sy.len() != 4 || sw.len() != 4 || sy[1] != sw[0] {
            return Err(mismatch("conv2d_input_grad", &sy, &sw));
        }
        let xs = [sy[0], sw[1], in_hw.0, in_hw.1];
        let g = self.conv_geom("conv2d_input_grad", &xs, &sw, stride, pad)?;
        if g.out_h() != sy[2] || g.out_w() != sy[3] {
            return Err(mismatch("conv2d_input_grad", &sy, &xs));
        }
        let out = kernels::conv2d_input_grad(self.data(gy), self.data(w), &g);
        Ok(self.push(
            xs.to_vec(),
            out,
            Op::ConvInputGrad { gy, w, stride, pad },
            &[gy, w],
        ))
    }

    /// Gradient of [`Graph::conv2d`] with respect to its kernel.
    pub fn conv2d_weight_grad(
        &mut self,
        x: TensorId,
        gy: TensorId,
        k_hw: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(gy).to_vec());
        if sx.len() != 4 || sy.len() != 4 || sx[0] != sy[0] {
            return Err(mismatch("conv2d_weight_grad", &sx, &sy));
        }
        let ws = [sy[1], sx[1], k_hw.0, k_hw.1];
        let g = self.conv_geom("conv2d_weight_grad", &sx, &ws, stride, pad)?;
        if g.out_h() != sy[2] || g.out_w() != sy[3] {
            return Err(mismatch("conv2d_weight_grad", &sx, &sy));
        }
        let out = kernels::conv2d_weight_grad(self.data(x), self.data(gy), &g);
        Ok(self.push(
            ws.to_vec(),
            out,
            Op::ConvWeightGrad { x, gy, stride, pad },
            &[x, gy],
        ))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (s, d) = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (s, d) = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, d, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (s, d) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, d, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        let d = self.data(a).iter().map(|&v| v * c).collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::Scale(a, c), &[a]))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).len() != 1 {
            return Err(mismatch("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.item(s);
        let d = self.data(a).iter().map(|&v| v * c).collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::MulScalar(a, s), &[a, s]))
    }

    /// Adds a `[C]` vector along axis 1 of `a` (`[N, C, ...]`).
    pub fn bias_add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(mismatch("bias_add", sa, sb));
        }
        let (ch, inner) = (sa[1], sa[2..].iter().product::<usize>());
        let bias = self.data(b);
        let mut out = self.data(a).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bias[i % ch];
            for v in chunk {
                *v += bv;
            }
        }
        Ok(self.push(sa.to_vec(), out, Op::BiasAdd(a, b), &[a, b]))
    }

    /// Sums `[N, C, ...]` down to `[C]`.
    pub fn channel_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() < 2 {
            return Err(invalid(
                "channel_sum",
                format!("need at least 2 axes, got {sa:?}"),
            ));
        }
        let (ch, inner) = (sa[1], sa[2..].iter().product::<usize>());
        let mut out = vec![T::zero(); ch];
        for (i, chunk) in self.data(a).chunks(inner).enumerate() {
            out[i % ch] += chunk.iter().copied().sum::<T>();
        }
        Ok(self.push(vec![ch], out, Op::ChannelSum(a), &[a]))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let d = self
            .data(a)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::Relu(a), &[a]))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let d = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), d, Op::Reshape(a), &[a]))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(invalid("flatten", "cannot flatten a scalar"));
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(a, &shape)
    }

    pub fn avgpool2d(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(invalid(
                "avgpool2d",
                format!("window {k} does not fit input {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], h / k, w / k];
        let out = kernels::avgpool2d(self.data(x), planes, h, w, k);
        Ok(self.push(shape, out, Op::AvgPool { x, k }, &[x]))
    }

    pub fn avgpool2d_adjoint(
        &mut self,
        g: TensorId,
        k: usize,
        in_hw: (usize, usize),
    ) -> Result<TensorId> {
        let s = self.shape(g);
        if s.len() != 4 || k == 0 || s[2] != in_hw.0 / k || s[3] != in_hw.1 / k {
            return Err(invalid(
                "avgpool2d_adjoint",
                format!("gradient {s:?} inconsistent with input {in_hw:?}"),
            ));
        }
        let shape = vec![s[0], s[1], in_hw.0, in_hw.1];
        let out = kernels::avgpool2d_adjoint(self.data(g), s[0] * s[1], in_hw.0, in_hw.1, k);
        Ok(self.push(shape, out, Op::AvgPoolAdjoint { g, k }, &[g]))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.data(a).iter().copied().sum::<T>();
        Ok(self.push(Vec::new(), vec![v], Op::Sum(a), &[a]))
    }

    fn matrix_dims(&self, op: &'static str, a: TensorId) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Row-wise softmax of a `[N, K]` matrix.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.matrix_dims("softmax", a)?;
        let out = kernels::softmax_rows(self.data(a), r, c);
        Ok(self.push(vec![r, c], out, Op::Softmax(a), &[a]))
    }

    /// Replaces every entry with the sum of its row.
    pub fn row_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.matrix_dims("row_sum", a)?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(a).chunks(c.max(1)) {
            let s = row.iter().copied().sum::<T>();
            out.extend(std::iter::repeat_n(s, c));
        }
        Ok(self.push(vec![r, c], out, Op::RowSum(a), &[a]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`. Accepts `[K]` (one
    /// sample) or `[N, K]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId> {
        let logits = if self.shape(logits).len() == 1 {
            let k = self.shape(logits)[0];
            self.reshape(logits, &[1, k])?
        } else {
            logits
        };
        let (n, k) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if labels.len() != n || n == 0 {
            return Err(mismatch(
                "softmax_cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        if !self.value(logits).all_finite() {
            return Err(TensorError::NonFinite("softmax_cross_entropy"));
        }
        let per = kernels::cross_entropy_rows(self.data(logits), k, labels);
        let mean = per.iter().copied().sum::<T>() / T::from_f64(n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.into(),
        };
        Ok(self.push(Vec::new(), vec![mean], op, &[logits]))
    }

    /// Per-row `1 - cos(a_i, target_i)` for `a: [N, D]`; a zero row yields
    /// distance 1 and zero gradient.
    pub fn row_cosine_distance(&mut self, a: TensorId, target: &[T]) -> Result<TensorId> {
        let (n, d) = self.matrix_dims("row_cosine_distance", a)?;
        if target.len() != n * d {
            return Err(mismatch(
                "row_cosine_distance",
                self.shape(a),
                &[target.len()],
            ));
        }
        let out = self
            .data(a)
            .chunks(d.max(1))
            .zip(target.chunks(d.max(1)))
            .map(|(x, t)| T::one() - cosine(x, t).0)
            .collect();
        let op = Op::RowCosineDistance {
            a,
            target: target.into(),
        };
        Ok(self.push(vec![n], out, op, &[a]))
    }

    /// `1 - cos(concat(inputs), concat(targets))`.
    pub fn cosine_distance(
        &mut self,
        inputs: &[TensorId],
        targets: Vec<Vec<T>>,
    ) -> Result<TensorId> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(invalid(
                "cosine_distance",
                "inputs and targets must pair up",
            ));
        }
        let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
        for (&i, t) in inputs.iter().zip(&targets) {
            if self.value(i).len() != t.len() {
                return Err(mismatch("cosine_distance", self.shape(i), &[t.len()]));
            }
            for (&x, &y) in self.data(i).iter().zip(t) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
        }
        let denom = (na * nb).sqrt();
        let v = if denom > T::zero() {
            T::one() - dot / denom
        } else {
            T::one()
        };
        let op = Op::CosineDistance {
            inputs: inputs.into(),
            targets: targets.into(),
        };
        Ok(self.push(Vec::new(), vec![v], op, inputs))
    }

    /// Isotropic total variation per sample of an NCHW batch, shape `[N]`.
    pub fn total_variation(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(invalid(
                "total_variation",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        let out = kernels::total_variation(self.data(x), s[0], s[1], s[2], s[3]);
        Ok(self.push(vec![s[0]], out, Op::TotalVariation(x), &[x]))
    }

    /// Sign pattern of every ReLU pre-activation, in graph order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.data(a).iter().map(|&v| v > T::zero()))
            .collect()
    }

    /// Populates `grad` on every differentiable tensor reachable from the
    /// scalar `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let adj = self.adjoints(loss, false)?;
        for (i, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                if self.nodes[i].value.requires_grad {
                    let g = self.data(a).to_vec();
                    self.nodes[i].value.grad = Some(g);
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradients of `loss` with respect to `wrt`, returned as graph tensors.
    /// With `create_graph` the results are themselves differentiable.
    /// Unreachable inputs receive zeros.
    pub fn gradients(
        &mut self,
        loss: TensorId,
        wrt: &[TensorId],
        create_graph: bool,
    ) -> Result<Vec<TensorId>> {
        let adj = self.adjoints(loss, create_graph)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adj.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    let n = self.value(w).len();
                    out.push(self.constant(&shape, vec![T::zero(); n])?);
                }
            }
        }
        Ok(out)
    }

    /// Clears all gradients and re-arms [`Graph::backward`].
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    fn adjoints(&mut self, root: TensorId, create_graph: bool) -> Result<Vec<Option<TensorId>>> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(root).to_vec()));
        }
        let saved = self.no_grad;
        self.no_grad = !create_graph;
        let res = self.adjoints_inner(root, create_graph);
        self.no_grad = saved;
        res
    }

    fn adjoints_inner(
        &mut self,
        root: TensorId,
        create_graph: bool,
    ) -> Result<Vec<Option<TensorId>>> {
        let mut adj: Vec<Option<TensorId>> = vec![None; root.0 + 1];
        if !self.requires_grad(root) {
            return Ok(adj);
        }
        let shape = self.shape(root).to_vec();
        adj[root.0] = Some(self.constant(&shape, vec![T::one()])?);
        for id in (0..=root.0).rev() {
            let Some(u) = adj[id] else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if create_graph && op.first_order_only() {
                return Err(TensorError::SecondOrderUnsupported(op.name()));
            }
            for (input, g) in self.backward_rule(TensorId(id), &op, u)? {
                adj[input.0] = Some(match adj[input.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }
        Ok(adj)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.requires_grad(id)
    }

    fn backward_rule(
        &mut self,
        out: TensorId,
        op: &Op<T>,
        u: TensorId,
    ) -> Result<Vec<(TensorId, TensorId)>> {
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(u, bt)?));
                }
                if self.rg(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, u)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(u)?)),
            Op::Conv2d { x, w, stride, pad } => {
                if self.rg(x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    res.push((x, self.conv2d_input_grad(u, w, hw, stride, pad)?));
                }
                if self.rg(w) {
                    let s = self.shape(w);
                    let k = (s[2], s[3]);
                    res.push((w, self.conv2d_weight_grad(x, u, k, stride, pad)?));
                }
            }
            Op::ConvInputGrad { gy, w, stride, pad } => {
                if self.rg(gy) {
                    res.push((gy, self.conv2d(u, w, stride, pad)?));
                }
                if self.rg(w) {
                    let s = self.shape(w);
                    let k = (s[2], s[3]);
                    res.push((w, self.conv2d_weight_grad(u, gy, k, stride, pad)?));
                }
            }
            Op::ConvWeightGrad { x, gy, stride, pad } => {
                if self.rg(x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    res.push((x, self.conv2d_input_grad(gy, u, hw, stride, pad)?));
                }
                if self.rg(gy) {
                    res.push((gy, self.conv2d(x, u, stride, pad)?));
                }
            }
            Op::Add(a, b) => {
                res.push((a, u));
                res.push((b, u));
            }
            Op::Sub(a, b) => {
                res.push((a, u));
                if self.rg(b) {
                    res.push((b, self.scale(u, -T::one())?));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    res.push((a, self.mul(u, b)?));
                }
                if self.rg(b) {
                    res.push((b, self.mul(u, a)?));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(u, c)?)),
            Op::MulScalar(a, s) => {
                if self.rg(a) {
                    res.push((a, self.mul_scalar(u, s)?));
                }
                if self.rg(s) {
                    let prod = self.mul(u, a)?;
                    let total = self.sum(prod)?;
                    let s_shape = self.shape(s).to_vec();
                    res.push((s, self.reshape(total, &s_shape)?));
                }
            }
            Op::BiasAdd(a, b) => {
                res.push((a, u));
                if self.rg(b) {
                    res.push((b, self.channel_sum(u)?));
                }
            }
            Op::ChannelSum(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len();
                let zeros = self.constant(&shape, vec![T::zero(); n])?;
                res.push((a, self.bias_add(zeros, u)?));
            }
            Op::Relu(a) => {
                let mask: Vec<T> = self
                    .data(a)
                    .iter()
                    .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
                    .collect();
                let shape = self.shape(a).to_vec();
                let m = self.constant(&shape, mask)?;
                res.push((a, self.mul(u, m)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.reshape(u, &shape)?));
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(x);
                let hw = (s[2], s[3]);
                res.push((x, self.avgpool2d_adjoint(u, k, hw)?));
            }
            Op::AvgPoolAdjoint { g, k } => res.push((g, self.avgpool2d(u, k)?)),
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len();
                let ones = self.constant(&shape, vec![T::one(); n])?;
                res.push((a, self.mul_scalar(ones, u)?));
            }
            Op::Softmax(a) => {
                let us = self.mul(u, out)?;
                let rs = self.row_sum(us)?;
                let centered = self.sub(u, rs)?;
                res.push((a, self.mul(out, centered)?));
            }
            Op::RowSum(a) => res.push((a, self.row_sum(u)?)),
            Op::SoftmaxCrossEntropy { logits, ref labels } => {
                let (n, k) = self.matrix_dims("softmax_cross_entropy", logits)?;
                let mut onehot = vec![T::zero(); n * k];
                for (i, &y) in labels.iter().enumerate() {
                    onehot[i * k + y] = T::one();
                }
                let oh = self.constant(&[n, k], onehot)?;
                let p = self.softmax(logits)?;
                let d = self.sub(p, oh)?;
                let d = self.scale(d, T::one() / T::from_f64(n as f64))?;
                res.push((logits, self.mul_scalar(d, u)?));
            }
            Op::RowCosineDistance { a, ref target } => {
                let (n, d) = self.matrix_dims("row_cosine_distance", a)?;
                let up = self.data(u).to_vec();
                let mut g = vec![T::zero(); n * d];
                for i in 0..n {
                    let x = &self.data(a)[i * d..(i + 1) * d];
                    let t = &target[i * d..(i + 1) * d];
                    cosine_distance_grad(x, t, up[i], &mut g[i * d..(i + 1) * d]);
                }
                res.push((a, self.constant(&[n, d], g)?));
            }
            Op::CosineDistance {
                ref inputs,
                ref targets,
            } => {
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for (&i, t) in inputs.iter().zip(targets.iter()) {
                    for (&x, &y) in self.data(i).iter().zip(t) {
                        dot += x * y;
                        na += x * x;
                        nb += y * y;
                    }
                }
                let up = self.item(u);
                let (norm_a, norm_b) = (na.sqrt(), nb.sqrt());
                for (&i, t) in inputs.iter().zip(targets.iter()) {
                    if !self.rg(i) {
                        continue;
                    }
                    let g: Vec<T> = if norm_a > T::zero() && norm_b > T::zero() {
                        let cos = dot / (norm_a * norm_b);
                        self.data(i)
                            .iter()
                            .zip(t)
                            .map(|(&x, &y)| -up * (y / (norm_a * norm_b) - cos * x / na))
                            .collect()
                    } else {
                        vec![T::zero(); t.len()]
                    };
                    let shape = self.shape(i).to_vec();
                    res.push((i, self.constant(&shape, g)?));
                }
            }
            Op::TotalVariation(x) => {
                let s = self.shape(x).to_vec();
                let g = kernels::total_variation_grad(
                    self.data(x),
                    self.data(u),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                );
                res.push((x, self.constant(&s, g)?));
            }
        }
        Ok(res)
    }
}

/// Returns `(cos, |x|)`; cos is 0 when either vector is zero.
fn cosine<T: Real>(x: &[T], t: &[T]) -> (T, T) {
    let (mut dot, mut nx, mut nt) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(t) {
        dot += a * b;
        nx += a * a;
        nt += b * b;
    }
    let denom = (nx * nt).sqrt();
    if denom > T::zero() {
        (dot / denom, nx.sqrt())
    } else {
        (T::zero(), nx.sqrt())
    }
}

fn cosine_distance_grad<T: Real>(x: &[T], t: &[T], up: T, out: &mut [T]) {
    let (cos, nx) = cosine(x, t);
    let nt = t.iter().map(|&v| v * v).sum::<T>().sqrt();
    if nx == T::zero() || nt == T::zero() {
        return;
    }
    for ((o, &a), &b) in out.iter_mut().zip(x).zip(t) {
        *o = -up * (b / (nx * nt) - cos * a / (nx * nx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.leaf(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let v = g.leaf(t(&[3, 1], &[0.3, -2.0, 7.5]));
        let y = g.matmul(eye, v).unwrap();
        assert_eq!(g.data(y), g.data(v));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[2, 2], &[1.0, -3.0, 0.5, 9.0]).with_grad());
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
        g.zero_grad();
        assert!(g.grad(v).is_none());
        g.backward(s).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates_branch_gradients() {
        // y = sum(relu(x) * 3) + sum(x * x) with x used in both branches.
        let xs = [0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &xs).with_grad());
        let r = g.relu(x).unwrap();
        let b1 = g.scale(r, 3.0).unwrap();
        let s1 = g.sum(b1).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum(sq).unwrap();
        let y = g.add(s1, s2).unwrap();
        g.backward(y).unwrap();

        // Same function with the input duplicated into two independent leaves.
        let mut h = Graph::new();
        let x1 = h.leaf(t(&[3], &xs).with_grad());
        let x2 = h.leaf(t(&[3], &xs).with_grad());
        let r = h.relu(x1).unwrap();
        let b1 = h.scale(r, 3.0).unwrap();
        let s1 = h.sum(b1).unwrap();
        let sq = h.mul(x2, x2).unwrap();
        let s2 = h.sum(sq).unwrap();
        let y = h.add(s1, s2).unwrap();
        h.backward(y).unwrap();
        let want: Vec<f64> = h
            .grad(x1)
            .unwrap()
            .iter()
            .zip(h.grad(x2).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.0, 1.0]).with_grad());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[0.7, 0.7]));
        let l = g.softmax_cross_entropy(a, &[1]).unwrap();
        assert!((g.item(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let a2 = g.reshape(a, &[1, 2]).unwrap();
        let p = g.softmax(a2).unwrap();
        assert_eq!(g.data(p), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_saturates_to_zero() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[500.0, -500.0]));
        let l = g.softmax_cross_entropy(a, &[0]).unwrap();
        assert!(g.item(l).abs() < 1e-12);
        assert!(g.item(l).is_finite());
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[1, 3]));
        assert_eq!(
            g.softmax_cross_entropy(a, &[3]).unwrap_err(),
            TensorError::LabelOutOfRange {
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn second_order_through_objective_ops_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(
            t(
                &[1, 1, 3, 3],
                &[0.1, 0.5, 0.2, 0.9, 0.4, 0.3, 0.7, 0.6, 0.8],
            )
            .with_grad(),
        );
        let tv = g.total_variation(x).unwrap();
        let s = g.sum(tv).unwrap();
        assert_eq!(
            g.gradients(s, &[x], true).unwrap_err(),
            TensorError::SecondOrderUnsupported("total_variation")
        );
        assert!(g.gradients(s, &[x], false).is_ok());
    }

    #[test]
    fn apply_dispatches_primitives() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.apply(Primitive::AvgPool2d { k: 2 }, &[a]).unwrap();
        assert_eq!(g.data(p), &[2.5]);
        let f = g.apply(Primitive::Flatten, &[a]).unwrap();
        assert_eq!(g.shape(f), &[1, 4]);
        assert!(g.apply(Primitive::Add, &[a]).is_err());
    }
}
