//! Gradient tape: records operations during the forward pass and replays
//! them in reverse to accumulate gradients.

use rand::Rng;

use crate::element::{gemm, lit, Element, MatRef};
use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_channels: usize },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    CrossGroupSum { x: Var, groups: usize, connected: Vec<bool> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Gelu { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Square { x: Var },
    Powf { x: Var, p: T },
    Affine { x: Var, scale: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, dims: (usize, usize, usize), factor: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of a forward computation. Confined to one thread of work.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid(op, format!("expected a [C,H,W] tensor, got {shape:?}"))),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(invalid(op, format!("expected a 2-D tensor, got {shape:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::from_vec(shape, data).expect("kernel output matches shape");
        // Nothing upstream needs a gradient: keep the value, drop the context.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let shape = value.shape().to_vec();
        self.push(&shape, data, op, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- convolution family -------------------------------------------------

    /// Dense 2-D convolution of `x[C,H,W]` with `w[Co,C,k,k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = dims3("conv2d", self.shape(x))?;
        let [co, ci, k, k2] = *self.shape(w) else {
            return Err(invalid("conv2d", format!("weight must be [Co,C,k,k], got {:?}", self.shape(w))));
        };
        if ci != c {
            return Err(mismatch("conv2d", &[co, c, k, k], self.shape(w)));
        }
        if k != k2 || k % 2 == 0 {
            return Err(invalid("conv2d", "kernel must be square with odd side"));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(mismatch("conv2d", &[co], self.shape(b)));
            }
        }
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            co,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(&[co, ho, wo], out, Op::Conv2d { x, w, b, geom, out_channels: co }, &inputs))
    }

    /// `k=1` convolution mixing channels.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
            return Err(invalid("pointwise_conv2d", format!("weight must be [Co,C,1,1], got {ws:?}")));
        }
        self.conv2d(x, w, b, 1, 0)
    }

    /// Per-channel `k×k` convolution with `w[C,1,k,k]`; channel count unchanged.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = dims3("depthwise_conv2d", self.shape(x))?;
        let [wc, one, k, k2] = *self.shape(w) else {
            return Err(invalid("depthwise_conv2d", format!("weight must be [C,1,k,k], got {:?}", self.shape(w))));
        };
        if wc != c || one != 1 {
            return Err(mismatch("depthwise_conv2d", &[c, 1, k, k], self.shape(w)));
        }
        if k != k2 || k % 2 == 0 {
            return Err(invalid("depthwise_conv2d", "kernel must be square with odd side"));
        }
        if stride == 0 {
            return Err(invalid("depthwise_conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid("depthwise_conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        Ok(self.push(&[c, ho, wo], out, Op::Depthwise { x, w, geom }, &[x, w]))
    }

    /// Splits channels into `groups` equal groups; group `i` of the result is the
    /// sum of every other group's input when `connected[i]`, zero otherwise.
    pub fn cross_group_sum(&mut self, x: Var, groups: usize, connected: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| invalid("cross_group_sum", "rank-0 input"))?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid("cross_group_sum", format!("{c} channels not divisible into {groups} groups")));
        }
        if connected.len() != groups {
            return Err(invalid("cross_group_sum", "connected mask length must equal group count"));
        }
        let out = kernels::cross_group_sum(self.value(x).data(), groups, connected);
        Ok(self.push(&shape, out, Op::CrossGroupSum { x, groups, connected: connected.to_vec() }, &[x]))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = dims3("maxpool2d", self.shape(x))?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(invalid("maxpool2d", "window must fit the input"));
        }
        if h % stride != 0 || w % stride != 0 || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(invalid("maxpool2d", format!("extents {h}x{w} not divisible by stride {stride}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), (c, h, w), k, stride);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        Ok(self.push(&[c, ho, wo], out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = dims3("upsample_nearest", self.shape(x))?;
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be >= 1"));
        }
        let out = kernels::upsample_forward(self.value(x).data(), (c, h, w), factor);
        Ok(self.push(&[c, h * factor, w * factor], out, Op::Upsample { x, dims: (c, h, w), factor }, &[x]))
    }

    // ---- element-wise ------------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s: T = lit(slope);
        self.unary(x, |v| if v > T::zero() { v } else { s * v }, Op::LeakyRelu { x, slope: s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let pt: T = lit(p);
        self.unary(x, |v| v.powf(pt), Op::Powf { x, p: pt })
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b): (T, T) = (lit(scale), lit(shift));
        self.unary(x, |v| s * v + b, Op::Affine { x, scale: s })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Training-mode inverted dropout; identity (no node recorded) when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep: T = lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, data, Op::Dropout { x, mask }, &[x]))
    }

    // ---- reductions and indexing ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(&[], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).sum() / lit(n as f64);
        self.push(&[], vec![s], Op::Mean { x }, &[x])
    }

    /// Flat-index gather into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(invalid("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(&[indices.len()], data, Op::Gather { x, indices: indices.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape, data, Op::Reshape { x }, &[x]))
    }

    /// Concatenation along `axis`; other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(&shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b], 0)
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid("slice", format!("range {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(&out_shape, data, Op::Slice { x, axis, start }, &[x]))
    }

    // ---- dense layers --------------------------------------------------------

    /// `x[N,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = dims2("linear", self.shape(x))?;
        let (dout, win) = dims2("linear", self.shape(w))?;
        if win != din {
            return Err(mismatch("linear", &[dout, din], self.shape(w)));
        }
        let mut out = vec![T::zero(); n * dout];
        let beta = if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear", &[dout], self.shape(b)));
            }
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
            T::one()
        } else {
            T::zero()
        };
        gemm(
            MatRef::new(self.value(x).data(), n, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            beta,
            &mut out,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(&[n, dout], out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", &[k, n], self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), k, n), T::zero(), &mut out);
        Ok(self.push(&[m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(x))?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(&[c, r], data, Op::Transpose { x }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
        let mut data = self.value(x).data().to_vec();
        if d > 0 {
            for row in data.chunks_exact_mut(d) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
        }
        Ok(self.push(&shape, data, Op::Softmax { x }, &[x]))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", &[d], self.shape(gain)));
        }
        let e: T = lit(eps);
        let dn: T = lit(d as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + e).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(&shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            for (input, grad) in self.vjp(node, g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let shape = self.nodes[input.0].value.shape();
                let grad = Tensor::from_vec(shape, grad).expect("vjp output matches input shape");
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node w.r.t. each of its inputs.
    fn vjp(&self, node: &Node<T>, gt: &Tensor<T>) -> Vec<(Var, Vec<T>)> {
        let g = gt.data();
        let y = node.value.data();
        let map1 = |x: Var, f: &dyn Fn(usize) -> T| -> Vec<(Var, Vec<T>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom, out_channels } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv2d_backward(self.val(*x), self.val(*w), g, geom, *out_channels, need);
                let mut out = Vec::new();
                out.extend(cg.dx.map(|d| (*x, d)));
                out.extend(cg.dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(
                    self.val(*x),
                    self.val(*w),
                    g,
                    geom,
                    (self.needs(*x), self.needs(*w)),
                );
                let mut out = Vec::new();
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                out
            }
            Op::CrossGroupSum { x, groups, connected } => {
                vec![(*x, kernels::cross_group_sum_backward(g, *groups, connected))]
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(*x);
                map1(*x, &|i| if xv[i] > T::zero() { g[i] } else { *slope * g[i] })
            }
            Op::Sigmoid { x } => map1(*x, &|i| g[i] * y[i] * (T::one() - y[i])),
            Op::Tanh { x } => map1(*x, &|i| g[i] * (T::one() - y[i] * y[i])),
            Op::Gelu { x } => {
                let xv = self.val(*x);
                map1(*x, &|i| g[i] * kernels::gelu_grad(xv[i]))
            }
            Op::Exp { x } => map1(*x, &|i| g[i] * y[i]),
            Op::Ln { x } => {
                let xv = self.val(*x);
                map1(*x, &|i| g[i] / xv[i])
            }
            Op::Square { x } => {
                let xv = self.val(*x);
                let two: T = lit(2.0);
                map1(*x, &|i| g[i] * two * xv[i])
            }
            Op::Powf { x, p } => {
                let xv = self.val(*x);
                let pm1 = *p - T::one();
                map1(*x, &|i| g[i] * *p * xv[i].powf(pm1))
            }
            Op::Affine { x, scale } => map1(*x, &|i| g[i] * *scale),
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut out = Vec::new();
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &b)| gi * b).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &a)| gi * a).collect()));
                }
                out
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, vec![g[0] / lit(n.max(1) as f64); n])]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                vec![(*x, dx)]
            }
            Op::Upsample { x, dims, factor } => vec![(*x, kernels::upsample_backward(g, *dims, *factor))],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<(Var, Vec<T>)> = inputs
                    .iter()
                    .map(|&v| (v, Vec::with_capacity(self.nodes[v.0].value.numel())))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (v, buf) in parts.iter_mut() {
                        let len = self.nodes[v.0].value.shape()[*axis] * inner;
                        buf.extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                parts
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = &mut dx[(o * n + start) * inner..(o * n + start + len) * inner];
                    dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Gather { x, indices } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&i, &gv) in indices.iter().zip(g) {
                    dx[i] = dx[i] + gv;
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Linear { x, w, b } => {
                let (n, din) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let dout = self.nodes[w.0].value.shape()[0];
                let mut out = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(MatRef::new(g, n, dout), MatRef::new(self.val(*w), dout, din), T::zero(), &mut dx);
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(MatRef::new(g, n, dout).t(), MatRef::new(self.val(*x), n, din), T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((b, db));
                }
                out
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let mut out = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(MatRef::new(g, m, n), MatRef::new(self.val(*b), k, n).t(), T::zero(), &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(MatRef::new(self.val(*a), m, k).t(), MatRef::new(g, m, n), T::zero(), &mut db);
                    out.push((*b, db));
                }
                out
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Softmax { x } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for ((dst, gr), yr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.nodes[gain.0].value.numel();
                let gv = self.val(*gain);
                let dn: T = lit(d as f64);
                let mut out = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * xr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] = db[j] + gr[j];
                        }
                    }
                    out.push((*bias, db));
                }
                out
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())],
        }
    }
}
