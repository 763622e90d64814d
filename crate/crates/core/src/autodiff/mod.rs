//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are created in execution order, so
//! walking the tape from the end visits them in reverse topological order.

pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Real, Tensor};

use kernels::{
    broadcast_map, broadcast_shape, layer_norm_forward, permute_map, softmax_forward, split_axis,
    ConvGeom,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Matmul(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        axis: usize,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        col: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Extra saved buffer (normalized activations for layer norm).
    saved: Option<Vec<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bindings: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-operation NaN/Inf scan. On by default in
    /// debug and test builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        self.push_saved(value, op, requires_grad, None)
    }

    fn push_saved(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        saved: Option<Vec<T>>,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Records a tensor as an input. It receives a gradient iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.detached(), Op::Leaf, rg)
            .expect("leaf values are not checked")
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            requires_grad: false,
            saved: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter to this tape. Repeated calls return the same
    /// node, so shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.constant(t.detached());
        self.nodes[v.0].requires_grad = true;
        self.bindings.insert(id, v);
        v
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings.iter().map(|(&id, &v)| (id, v))
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::dim(format!("{name}: cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let ma = broadcast_map(&out, sa);
        let mb = broadcast_map(&out, sb);
        Ok((out, ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.binary(a, b, "add")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| da[i] + db[j]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.binary(a, b, "sub")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| da[i] - db[j]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.binary(a, b, "mul")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| da[i] * db[j]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.binary(a, b, "div")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| da[i] / db[j]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applies.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), rg)
    }

    fn check_axis(&self, a: Var, axis: usize, name: &str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(format!(
                "{name}: axis {axis} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let x = self.value(a);
        let data = softmax_forward(x.data(), x.shape(), axis);
        let shape = x.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::Softmax(a, axis), rg)
    }

    /// Normalizes to zero mean and unit variance along `axis`. No affine
    /// transform; callers apply learned scale/shift with `mul`/`add`.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis(a, axis, "layer_norm")?;
        let x = self.value(a);
        let (y, rstd) = layer_norm_forward(x.data(), x.shape(), axis, eps);
        let shape = x.shape().to_vec();
        let rg = self.rg(a);
        let saved = Some(y.clone());
        self.push_saved(
            Tensor::new(shape, y)?,
            Op::LayerNorm { x: a, axis, rstd },
            rg,
            saved,
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if numel(shape) != x.len() {
            return Err(Error::dim(format!(
                "reshape: {:?} cannot become {shape:?}",
                x.shape()
            )));
        }
        let t = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::dim(format!(
                "permute: {axes:?} is not a permutation of rank {rank}"
            )));
        }
        let (shape, map) = permute_map(x.shape(), axes);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat: no inputs"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along {axis}: {s:?} does not match {base:?}"
                )));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis, "narrow")?;
        let x = self.value(a);
        if len == 0 || start + len > x.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow: [{start}, {}) outside axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::Narrow { x: a, axis, start }, rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.sum() / T::lit(x.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ---- convolution ----

    /// 2D convolution of `x: [C_in, H, W]` with `kernels: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::dim(format!(
                "conv2d: input {sx:?} incompatible with kernels {sw:?}"
            )));
        }
        let geom = ConvGeom::new(
            sx[0],
            [1, sx[1], sx[2]],
            [1, sw[2], sw[3]],
            [1, stride, stride],
            [0, padding, padding],
        )
        .ok_or_else(|| {
            Error::dim(format!(
                "conv2d: kernel {}x{} larger than padded input {:?} (pad {padding})",
                sw[2], sw[3], sx
            ))
        })?;
        let [_, oh, ow] = geom.output;
        self.conv_general(x, kernels, geom, vec![sw[0], oh, ow])
    }

    /// 3D convolution of `x: [C_in, T, H, W]` with
    /// `kernels: [C_out, C_in, kt, kh, kw]`, no padding.
    pub fn conv3d(&mut self, x: Var, kernels: Var, stride: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] {
            return Err(Error::dim(format!(
                "conv3d: input {sx:?} incompatible with kernels {sw:?}"
            )));
        }
        let geom = ConvGeom::new(
            sx[0],
            [sx[1], sx[2], sx[3]],
            [sw[2], sw[3], sw[4]],
            stride,
            [0; 3],
        )
        .ok_or_else(|| Error::dim(format!("conv3d: kernel {sw:?} larger than input {sx:?}")))?;
        let [ot, oh, ow] = geom.output;
        self.conv_general(x, kernels, geom, vec![sw[0], ot, oh, ow])
    }

    fn conv_general(&mut self, x: Var, w: Var, geom: ConvGeom, shape: Vec<usize>) -> Result<Var> {
        let col = geom.im2col(self.value(x).data());
        let c_out = shape[0];
        let (k, n) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); c_out * n];
        T::gemm(c_out, k, n, self.value(w).data(), false, &col, false, T::zero(), &mut out);
        let rg = self.rg(x) || self.rg(w);
        let col = if self.rg(w) { col } else { Vec::new() };
        self.push(Tensor::new(shape, out)?, Op::Conv { x, w, geom, col }, rg)
    }

    /// Transposed 3D convolution of `x: [C_in, T, H, W]` with
    /// `kernels: [C_in, C_out, kt, kh, kw]`. Output extent per axis is
    /// `(n - 1) * stride + k`.
    pub fn conv_transpose3d(&mut self, x: Var, kernels: Var, stride: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sw[0] != sx[0] {
            return Err(Error::dim(format!(
                "conv_transpose3d: input {sx:?} incompatible with kernels {sw:?}"
            )));
        }
        if stride.contains(&0) {
            return Err(Error::dim("conv_transpose3d: zero stride"));
        }
        let kernel = [sw[2], sw[3], sw[4]];
        let mut big = [0; 3];
        for d in 0..3 {
            big[d] = (sx[d + 1] - 1) * stride[d] + kernel[d];
        }
        // Geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeom::new(sw[1], big, kernel, stride, [0; 3])
            .ok_or_else(|| Error::dim("conv_transpose3d: degenerate geometry"))?;
        debug_assert_eq!(geom.output, [sx[1], sx[2], sx[3]]);
        let (c_in, k, n) = (sx[0], geom.patch_len(), geom.out_len());
        let mut col = vec![T::zero(); k * n];
        T::gemm(k, c_in, n, self.value(kernels).data(), true, self.value(x).data(), false, T::zero(), &mut col);
        let mut out = vec![T::zero(); geom.in_len()];
        geom.col2im(&col, &mut out);
        let rg = self.rg(x) || self.rg(kernels);
        let shape = vec![sw[1], big[0], big[1], big[2]];
        self.push(
            Tensor::new(shape, out)?,
            Op::ConvTranspose { x, w: kernels, geom },
            rg,
        )
    }

    // ---- backward ----

    /// Propagates gradients from a scalar `loss`. Gradients of leaves and
    /// bound parameters accumulate across calls; intermediate gradients are
    /// recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        self.accum(loss, &[T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn accum_owned(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums an output-shaped gradient back onto a broadcast operand.
    fn reduce_broadcast(&self, out_shape: &[usize], operand: Var, g: &[T], f: impl Fn(usize, T) -> T) -> Vec<T> {
        let in_shape = self.shape(operand);
        let mut acc = vec![T::zero(); numel(in_shape)];
        if in_shape == out_shape {
            for (i, (a, &gi)) in acc.iter_mut().zip(g).enumerate() {
                *a = f(i, gi);
            }
        } else {
            for (i, &j) in broadcast_map(out_shape, in_shape).iter().enumerate() {
                acc[j] += f(i, g[i]);
            }
        }
        acc
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        // Temporarily take the op so `self` can be borrowed mutably below.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(op, Op::Sub(..));
                if self.rg(*a) {
                    let ga = self.reduce_broadcast(&out_shape, *a, g, |_, x| x);
                    self.accum_owned(*a, ga);
                }
                if self.rg(*b) {
                    let gb = self.reduce_broadcast(&out_shape, *b, g, |_, x| if neg { -x } else { x });
                    self.accum_owned(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let mb = broadcast_map(&out_shape, self.shape(b));
                    let db = self.value(b).data();
                    let ga = self.reduce_broadcast(&out_shape, a, g, |k, x| x * db[mb[k]]);
                    self.accum_owned(a, ga);
                }
                if self.rg(b) {
                    let ma = broadcast_map(&out_shape, self.shape(a));
                    let da = self.value(a).data();
                    let gb = self.reduce_broadcast(&out_shape, b, g, |k, x| x * da[ma[k]]);
                    self.accum_owned(b, gb);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let mb = broadcast_map(&out_shape, self.shape(b));
                let db = self.value(b).data();
                let ga = self
                    .rg(a)
                    .then(|| self.reduce_broadcast(&out_shape, a, g, |k, x| x / db[mb[k]]));
                let gb = self.rg(b).then(|| {
                    let ma = broadcast_map(&out_shape, self.shape(a));
                    let da = self.value(a).data();
                    self.reduce_broadcast(&out_shape, b, g, |k, x| {
                        let d = db[mb[k]];
                        -x * da[ma[k]] / (d * d)
                    })
                });
                if let Some(ga) = ga {
                    self.accum_owned(a, ga);
                }
                if let Some(gb) = gb {
                    self.accum_owned(b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                let ga = g.iter().map(|&x| x * c).collect();
                self.accum_owned(*a, ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accum(*a, g),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accum_owned(*a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                self.accum_owned(*a, ga);
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
                self.accum_owned(*a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                    .collect();
                self.accum_owned(*a, ga);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.value(b).data(), true, T::zero(), &mut ga);
                    self.accum_owned(a, ga);
                }
                if self.rg(b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(a).data(), true, g, false, T::zero(), &mut gb);
                    self.accum_owned(b, gb);
                }
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = split_axis(&out_shape, *axis);
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let base = o * n * inner + q;
                        let dot: T = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            ga[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accum_owned(*a, ga);
            }
            Op::LayerNorm { x, axis, rstd } => {
                let xhat = self.nodes[i].saved.as_deref().expect("layer norm saves output");
                let (outer, n, inner) = split_axis(&out_shape, *axis);
                let nf = T::lit(n as f64);
                let mut gx = vec![T::zero(); xhat.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let base = o * n * inner + q;
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..n {
                            let idx = base + j * inner;
                            mean_g += g[idx];
                            mean_gx += g[idx] * xhat[idx];
                        }
                        mean_g /= nf;
                        mean_gx /= nf;
                        let r = rstd[o * inner + q];
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] = r * (g[idx] - mean_g - xhat[idx] * mean_gx);
                        }
                    }
                }
                self.accum_owned(*x, gx);
            }
            Op::Permute(a, axes) => {
                let (_, map) = permute_map(self.shape(*a), axes);
                let mut ga = vec![T::zero(); g.len()];
                for (k, &src) in map.iter().enumerate() {
                    ga[src] = g[k];
                }
                self.accum_owned(*a, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                let extents: Vec<usize> = parts.iter().map(|&p| self.shape(p)[*axis]).collect();
                let total: usize = extents.iter().sum();
                for (&p, &ext) in parts.iter().zip(&extents) {
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[s..s + ext * inner]);
                        }
                        self.accum_owned(p, gp);
                    }
                    offset += ext;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&in_shape, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); numel(&in_shape)];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum_owned(*x, gx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accum_owned(*a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / T::lit(n as f64);
                self.accum_owned(*a, vec![v; n]);
            }
            Op::Conv { x, w, geom, col } => {
                let (x, w) = (*x, *w);
                let c_out = out_shape[0];
                let (k, n) = (geom.patch_len(), geom.out_len());
                if self.rg(w) {
                    let mut gw = vec![T::zero(); c_out * k];
                    T::gemm(c_out, n, k, g, false, col, true, T::zero(), &mut gw);
                    self.accum_owned(w, gw);
                }
                if self.rg(x) {
                    let mut gcol = vec![T::zero(); k * n];
                    T::gemm(k, c_out, n, self.value(w).data(), true, g, false, T::zero(), &mut gcol);
                    let mut gx = vec![T::zero(); geom.in_len()];
                    geom.col2im(&gcol, &mut gx);
                    self.accum_owned(x, gx);
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                let (x, w) = (*x, *w);
                let c_in = self.shape(x)[0];
                let (k, n) = (geom.patch_len(), geom.out_len());
                let gcol = geom.im2col(g);
                if self.rg(x) {
                    let mut gx = vec![T::zero(); c_in * n];
                    T::gemm(c_in, k, n, self.value(w).data(), false, &gcol, false, T::zero(), &mut gx);
                    self.accum_owned(x, gx);
                }
                if self.rg(w) {
                    let mut gw = vec![T::zero(); c_in * k];
                    T::gemm(c_in, n, k, self.value(x).data(), false, &gcol, true, T::zero(), &mut gw);
                    self.accum_owned(w, gw);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Ln(..) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Matmul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "conv_transpose3d",
        }
    }
}

#[cfg(test)]
mod tests;
