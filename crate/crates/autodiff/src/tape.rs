//! Wengert tape: every forward op appends a node, `backward` replays the
//! nodes in reverse and accumulates vector-Jacobian products.
//!
//! A tape lives for one forward pass. Parameters are copied in when they are
//! first referenced and their gradients flow back into the [`ParamStore`].

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom, UpsampleMode};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, broadcast_shapes, broadcast_strides, mapping, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct MatGeom {
    batch_a: usize,
    batch_b: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum { x: Var, kept: Vec<usize> },
    MatMul { a: Var, b: Var, geom: MatGeom },
    Conv2d { x: Var, w: Var, geom: ConvGeom, batch: usize, cout: usize },
    Upsample { x: Var, mode: UpsampleMode },
    Reshape(Var),
    TransposeLast2(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    GatherRows { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if `var` was on the
    /// differentiable path.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn ensure_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(), TensorError> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Broadcast `t` (data + shape) out to `out_shape`.
fn expand<T: Scalar>(data: &[T], shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let out_n: usize = out_shape.iter().product();
    if data.len() == out_n {
        return data.to_vec();
    }
    let bs = broadcast_strides(shape, out_shape);
    let mut out = vec![T::zero(); out_n];
    tensor::for_each_mapped(out_shape, mapping(shape, out_shape, &bs), |i, j| out[i] = data[j]);
    out
}

fn binary_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let out_n: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = if a.numel() == out_n && b.numel() == out_n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if a.numel() == out_n {
        let bs = broadcast_strides(b.shape(), &out_shape);
        let mut out = vec![T::zero(); out_n];
        tensor::for_each_mapped(&out_shape, mapping(b.shape(), &out_shape, &bs), |i, j| out[i] = f(ad[i], bd[j]));
        out
    } else if b.numel() == out_n {
        let bs = broadcast_strides(a.shape(), &out_shape);
        let mut out = vec![T::zero(); out_n];
        tensor::for_each_mapped(&out_shape, mapping(a.shape(), &out_shape, &bs), |i, j| out[i] = f(ad[j], bd[i]));
        out
    } else {
        let ea = expand(ad, a.shape(), &out_shape);
        let eb = expand(bd, b.shape(), &out_shape);
        ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(out_shape, data)
}

fn last_dim(op: &'static str, t: &Tensor<impl Scalar>) -> Result<usize, TensorError> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(TensorError::invalid(op, format!("needs a non-empty last axis, got {:?}", t.shape()))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Data that takes no gradient (features, positional encodings, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Non-parameter leaf whose gradient is kept (see [`Gradients::wrt`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var, TensorError> {
        ensure_finite(op, self.value(a))?;
        ensure_finite(op, self.value(b))?;
        let out = binary_map(op, self.value(a), self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var, TensorError> {
        ensure_finite(op, self.value(x))?;
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, node, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary("add_scalar", x, |e| e + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary("mul_scalar", x, |e| e * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.mul_scalar(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("exp", x, |e| e.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("ln", x, |e| e.ln(), Op::Ln(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |e| if e > T::zero() { e } else { T::zero() }, Op::Relu(x))
    }

    /// `ln(1 + exp(x))`.
    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        let e = self.exp(x)?;
        let e1 = self.add_scalar(e, T::one())?;
        self.ln(e1)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        ensure_finite("softmax", self.value(x))?;
        let n = last_dim("softmax", self.value(x))?;
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), kernels::softmax_rows(v.data(), n))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        ensure_finite("log_softmax", self.value(x))?;
        let n = last_dim("log_softmax", self.value(x))?;
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), kernels::log_softmax_rows(v.data(), n))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        ensure_finite("sum", self.value(x))?;
        let shape = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(TensorError::invalid("sum", format!("axis {bad} out of range for shape {shape:?}")));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let bs = broadcast_strides(&kept, &shape);
        let mut out = vec![T::zero(); kept.iter().product()];
        let xd = self.value(x).data();
        tensor::for_each_mapped(&shape, mapping(&kept, &shape, &bs), |i, j| out[j] = out[j] + xd[i]);
        let out_shape = if keepdim {
            kept.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Sum { x, kept }, rg))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var, TensorError> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum(x, axes, keepdim)?;
        self.mul_scalar(s, T::one() / T::of(count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    /// Matrix product over the last two axes. Either side may carry one
    /// leading batch axis; a missing or size-1 batch axis broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        ensure_finite("matmul", self.value(a))?;
        ensure_finite("matmul", self.value(b))?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(mismatch());
        }
        let split = |s: &[usize]| if s.len() == 3 { (s[0], s[1], s[2]) } else { (1, s[0], s[1]) };
        let (batch_a, m, k) = split(&sa);
        let (batch_b, k2, n) = split(&sb);
        if k != k2 || (batch_a != batch_b && batch_a != 1 && batch_b != 1) {
            return Err(mismatch());
        }
        let batch = batch_a.max(batch_b);
        let geom = MatGeom { batch_a, batch_b, batch, m, k, n };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ai = if batch_a == 1 { 0 } else { bi };
            let bj = if batch_b == 1 { 0 } else { bi };
            kernels::gemm_acc(
                &ad[ai * m * k..(ai + 1) * m * k],
                &bd[bj * k * n..(bj + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 3 || sb.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, geom }, rg))
    }

    /// Stride-1 convolution with `pad` zeros on every side.
    /// `x` is `[cin, h, w]` or `[n, cin, h, w]`; `w` is `[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var, TensorError> {
        ensure_finite("conv2d", self.value(x))?;
        ensure_finite("conv2d", self.value(w))?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "conv2d", lhs: sx.clone(), rhs: sw.clone() };
        let (batch, cin, h, wd) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(mismatch()),
        };
        if sw.len() != 4 || sw[1] != cin || h + 2 * pad < sw[2] || wd + 2 * pad < sw[3] {
            return Err(mismatch());
        }
        let cout = sw[0];
        let geom = ConvGeom { cin, h, w: wd, kh: sw[2], kw: sw[3], pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); batch * cout * oh * ow];
        for bi in 0..batch {
            let cols = kernels::im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], geom);
            kernels::gemm_acc(wdat, &cols, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow], cout, geom.patch(), oh * ow);
        }
        let shape = if sx.len() == 3 { vec![cout, oh, ow] } else { vec![batch, cout, oh, ow] };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, geom, batch, cout }, rg))
    }

    /// 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var, TensorError> {
        ensure_finite("upsample2x", self.value(x))?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("upsample2x", format!("needs rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).numel() / (h * w).max(1);
        let out = kernels::upsample2x(self.value(x).data(), planes, h, w, mode);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, mode }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: v.shape().to_vec(), rhs: shape.to_vec() });
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for block in xd.chunks_exact((r * c).max(1)) {
            out.extend(kernels::transpose(block, r, c));
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast2(x), rg))
    }

    /// Replaces elements where `mask` (broadcastable to `x`) is true with
    /// `value`. Masked positions receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], mask_shape: &[usize], value: T) -> Result<Var, TensorError> {
        ensure_finite("masked_fill", self.value(x))?;
        let s = self.shape(x).to_vec();
        if mask.len() != mask_shape.iter().product::<usize>() || broadcast_shapes(mask_shape, &s).as_deref() != Some(&s[..]) {
            return Err(TensorError::ShapeMismatch { op: "masked_fill", lhs: s, rhs: mask_shape.to_vec() });
        }
        let full: Vec<bool> = {
            let bs = broadcast_strides(mask_shape, &s);
            let mut out = vec![false; s.iter().product()];
            tensor::for_each_mapped(&s, mapping(mask_shape, &s, &bs), |i, j| out[i] = mask[j]);
            out
        };
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&full)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, data)?, Op::MaskedFill { x, mask: full }, rg))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("gather_rows", format!("needs a matrix, got {s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::invalid("gather_rows", format!("row {bad} out of range for {} rows", s[0])));
        }
        let c = s[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![indices.len(), c], out)?, Op::GatherRows { x, indices: indices.to_vec() }, rg))
    }

    /// Runs the reverse pass from a scalar `loss`, adding parameter gradients
    /// into `store`. Parameters not reached by the loss are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst = *dst + src;
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.rg(*a) {
                    self.accumulate(grads, *a, tensor::reduce_to(g, out_shape, self.shape(*a)));
                }
                if self.rg(*b) {
                    let gb: Vec<T> = g.iter().map(|&v| v * sign).collect();
                    self.accumulate(grads, *b, tensor::reduce_to(&gb, out_shape, self.shape(*b)));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ea = expand(va.data(), va.shape(), out_shape);
                let eb = expand(vb.data(), vb.shape(), out_shape);
                let is_div = matches!(node.op, Op::Div(..));
                if self.rg(*a) {
                    let ga: Vec<T> = if is_div {
                        g.iter().zip(&eb).map(|(&g, &b)| g / b).collect()
                    } else {
                        g.iter().zip(&eb).map(|(&g, &b)| g * b).collect()
                    };
                    self.accumulate(grads, *a, tensor::reduce_to(&ga, out_shape, va.shape()));
                }
                if self.rg(*b) {
                    let gb: Vec<T> = if is_div {
                        g.iter().zip(&ea).zip(&eb).map(|((&g, &a), &b)| -g * a / (b * b)).collect()
                    } else {
                        g.iter().zip(&ea).map(|(&g, &a)| g * a).collect()
                    };
                    self.accumulate(grads, *b, tensor::reduce_to(&gb, out_shape, vb.shape()));
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulScalar(x, c) => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::Exp(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
            Op::Ln(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xd).map(|(&g, &x)| g / x).collect());
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let gx = g.iter().zip(xd).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().expect("softmax rank");
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let n = *out_shape.last().expect("log_softmax rank");
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x, kept } => {
                let shape = self.shape(*x);
                self.accumulate(grads, *x, expand(g, kept, shape));
            }
            Op::MatMul { a, b, geom } => {
                let MatGeom { batch_a, batch_b, batch, m, k, n } = *geom;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); batch_a * m * k];
                    for bi in 0..batch {
                        let ai = if batch_a == 1 { 0 } else { bi };
                        let bj = if batch_b == 1 { 0 } else { bi };
                        let bt = kernels::transpose(&bd[bj * k * n..(bj + 1) * k * n], k, n);
                        kernels::gemm_acc(&g[bi * m * n..(bi + 1) * m * n], &bt, &mut ga[ai * m * k..(ai + 1) * m * k], m, n, k);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); batch_b * k * n];
                    for bi in 0..batch {
                        let ai = if batch_a == 1 { 0 } else { bi };
                        let bj = if batch_b == 1 { 0 } else { bi };
                        let at = kernels::transpose(&ad[ai * m * k..(ai + 1) * m * k], m, k);
                        kernels::gemm_acc(&at, &g[bi * m * n..(bi + 1) * m * n], &mut gb[bj * k * n..(bj + 1) * k * n], k, m, n);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, geom, batch, cout } => {
                let (batch, cout) = (*batch, *cout);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let plane = geom.out_h() * geom.out_w();
                let in_plane = geom.cin * geom.h * geom.w;
                let mut gw = vec![T::zero(); wd.len()];
                let mut gx = vec![T::zero(); xd.len()];
                let wt = kernels::transpose(wd, cout, geom.patch());
                for bi in 0..batch {
                    let gout = &g[bi * cout * plane..(bi + 1) * cout * plane];
                    if self.rg(*w) {
                        let cols = kernels::im2col(&xd[bi * in_plane..(bi + 1) * in_plane], *geom);
                        let cols_t = kernels::transpose(&cols, geom.patch(), plane);
                        kernels::gemm_acc(gout, &cols_t, &mut gw, cout, plane, geom.patch());
                    }
                    if self.rg(*x) {
                        let mut gcols = vec![T::zero(); geom.patch() * plane];
                        kernels::gemm_acc(&wt, gout, &mut gcols, geom.patch(), cout, plane);
                        kernels::col2im_acc(&gcols, *geom, &mut gx[bi * in_plane..(bi + 1) * in_plane]);
                    }
                }
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample { x, mode } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*x).numel() / (h * w).max(1);
                self.accumulate(grads, *x, kernels::upsample2x_backward(g, planes, h, w, *mode));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::TransposeLast2(x) => {
                let (r, c) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                let mut gx = Vec::with_capacity(g.len());
                for block in g.chunks_exact((r * c).max(1)) {
                    gx.extend(kernels::transpose(block, r, c));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedFill { x, mask } => {
                let gx = g.iter().zip(mask).map(|(&g, &m)| if m { T::zero() } else { g }).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, indices } => {
                let c = out_shape[1];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[row * c + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let a_data = [1.5, -2.0, 3.0, 0.25, 9.0, -1.0, 4.0, 4.0, 0.5];
        let a = tape.constant(t(&[3, 3], &a_data));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), &a_data);
    }

    #[test]
    fn mean_kernel_keeps_constant_interior() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::<f64>::full(&[1, 6, 7], 3.25));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let out = tape.conv2d(img, k, 1).unwrap();
        let v = tape.value(out);
        for y in 1..5 {
            for x in 1..6 {
                assert!((v.at(&[0, y, x]) - 3.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(p).grad.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[3], &[0.3, -0.7, 1.1]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let e = tape.exp(v).unwrap();
        let z = tape.mul_scalar(e, 0.0).unwrap();
        let loss = tape.sum_all(z).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(p).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unreached_parameters_keep_their_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0]));
        let unused = store.add("unused", t(&[2], &[1.0, 2.0]));
        store.get_mut(unused).grad = t(&[2], &[7.0, 8.0]);
        let mut tape = Tape::new();
        let v = tape.param(&store, used);
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(unused).grad.data(), &[7.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x, &mut store), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn masked_positions_get_no_gradient() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = tape.masked_fill(x, &[false, true], &[2, 1], 0.0).unwrap();
        let sq = tape.mul(m, m).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss, &mut store).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_input_is_rejected_in_debug_builds() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::scalar(f32::NAN));
        let res = tape.exp(a);
        if cfg!(debug_assertions) {
            assert!(matches!(res, Err(TensorError::NonFinite { op: "exp" })));
        }
    }
}
