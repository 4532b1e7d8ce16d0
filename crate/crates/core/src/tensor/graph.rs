//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever it needs for
//! the backward pass. Inputs always precede their consumers, so a reverse sweep
//! over the node list is a valid topological order.

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvDims, ConvSpec};
use super::kernels::{bgemm_acc, gemm_acc};
use super::{c, Float, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Silu,
    /// Tanh approximation; the backward pass differentiates the approximation.
    Gelu,
    Relu,
    Identity,
}

impl ActivationKind {
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            ActivationKind::Silu => x * sigmoid(x),
            ActivationKind::Gelu => {
                let u = gelu_inner(x);
                c::<T>(0.5) * x * (T::one() + u.tanh())
            }
            ActivationKind::Relu => x.max(T::zero()),
            ActivationKind::Identity => x,
        }
    }

    pub fn derivative<T: Float>(self, x: T) -> T {
        match self {
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            ActivationKind::Gelu => {
                let t = gelu_inner(x).tanh();
                let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_C) * x * x);
                c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
            }
            ActivationKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Identity => T::one(),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[inline]
fn gelu_inner<T: Float>(x: T) -> T {
    c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x)
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Whether batch normalization uses batch statistics or stored running statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for running-statistics updates.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
        mean: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Activation(Var, ActivationKind),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Img2Seq(Var),
    Seq2Img(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    MeanSpatial(Var),
    Tile0(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
    grad: Option<Tensor<T>>,
}

/// A single-owner differentiation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    corrupt_backward: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            corrupt_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deliberately perturbs the layer-norm gamma gradient so that verification
    /// tooling can be shown to catch a broken backward pass.
    #[doc(hidden)]
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf (or of a retained interior node).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Keeps the gradient of an interior node after [`Graph::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s and is repeated
    /// over the leading dimensions.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("cannot broadcast {:?} onto {:?}", sb, sa));
        }
        let vb = self.value(b).data();
        let m = vb.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % m])
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| x * s).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / c(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]` transposed
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm of {:?} by {:?}", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err!(
                "bmm inner dimensions differ: {:?} by {:?} (trans_b={trans_b})",
                sa,
                sb
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        bgemm_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            false,
            trans_b,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Token-wise affine map: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(dim_err!("linear of {:?} by weight {:?}", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let vb = self.value(b).data();
            if vb.len() != n {
                return Err(dim_err!("linear bias has {} entries, expected {n}", vb.len()));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(vb);
            }
        }
        gemm_acc(&mut out, self.value(x).data(), self.value(w).data(), m, k, n, false, false);
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.value(b).numel() != dims.cout {
                return Err(dim_err!(
                    "conv bias has {} entries, expected {}",
                    self.value(b).numel(),
                    dims.cout
                ));
            }
        }
        let out = conv::forward_kernel(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().ok_or_else(|| dim_err!("softmax of a 0-d tensor"))?;
        if n == 0 {
            return Err(dim_err!("softmax over an empty dimension"));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape().last().ok_or_else(|| dim_err!("layernorm of a 0-d tensor"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(dim_err!("layernorm affine parameters must have {d} entries"));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = v.numel() / d.max(1);
        let mut out = vec![T::zero(); v.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = T::one() / c(d as f64);
        for (xr, or) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for i in 0..d {
                or[i] = (xr[i] - mean) * rstd * g[i] + bt[i];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Batch normalization over `N·H·W` for each channel of an NCHW tensor.
    /// In training mode the batch statistics are returned for running updates.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(dim_err!("batchnorm2d expects NCHW, got {:?}", s));
        }
        let (n, ch, plane) = (s[0], s[1], s[2] * s[3]);
        let count = n * plane;
        if count == 0 {
            return Err(dim_err!("batchnorm2d over an empty batch"));
        }
        if self.value(gamma).numel() != ch || self.value(beta).numel() != ch {
            return Err(dim_err!("batchnorm2d affine parameters must have {ch} entries"));
        }
        let xd = v.data();
        let mut mean = vec![T::zero(); ch];
        let mut rstd = vec![T::zero(); ch];
        let mut stats = None;
        match mode {
            BatchNormMode::Train => {
                let mut unbiased = vec![T::zero(); ch];
                let inv = T::one() / c(count as f64);
                for cidx in 0..ch {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let p = &xd[(b * ch + cidx) * plane..(b * ch + cidx + 1) * plane];
                        acc += p.iter().copied().sum::<T>();
                    }
                    let m = acc * inv;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let p = &xd[(b * ch + cidx) * plane..(b * ch + cidx + 1) * plane];
                        sq += p.iter().map(|&a| (a - m) * (a - m)).sum::<T>();
                    }
                    mean[cidx] = m;
                    rstd[cidx] = T::one() / (sq * inv + eps).sqrt();
                    unbiased[cidx] = if count > 1 {
                        sq / c((count - 1) as f64)
                    } else {
                        T::zero()
                    };
                }
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
            }
            BatchNormMode::Eval { mean: rm, var: rv } => {
                if rm.len() != ch || rv.len() != ch {
                    return Err(dim_err!("running statistics must have {ch} entries"));
                }
                mean.copy_from_slice(rm);
                for (r, &var) in rstd.iter_mut().zip(rv) {
                    *r = T::one() / (var + eps).sqrt();
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for cidx in 0..ch {
                let r = (b * ch + cidx) * plane..(b * ch + cidx + 1) * plane;
                let (m, rs) = (mean[cidx], rstd[cidx]);
                for (o, &a) in out[r.clone()].iter_mut().zip(&xd[r]) {
                    *o = (a - m) * rs * g[cidx] + bt[cidx];
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BatchNormMode::Train);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                train,
            },
            rg,
        );
        Ok((var, stats))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| kind.apply(a)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Activation(x, kind), rg)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat along {axis}: {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Channel concatenation of NCHW maps.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(dim_err!(
                "narrow [{start}, {}) along axis {axis} of {:?}",
                start + len,
                s
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Token slice of a `[N, L, D]` sequence.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(dim_err!("slice_tokens expects [N,L,D], got {:?}", self.shape(x)));
        }
        self.narrow(x, 1, start, len)
    }

    /// `[N,C,H,W]` feature map to `[N,H·W,C]` token sequence.
    pub fn img2seq(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("img2seq expects NCHW, got {:?}", s));
        }
        let (n, ch, l) = (s[0], s[1], s[2] * s[3]);
        let out = transpose_last2(self.value(x).data(), n, ch, l);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, l, ch], out)?, Op::Img2Seq(x), rg))
    }

    /// `[N,L,C]` token sequence to `[N,C,h,w]`; requires `L == h·w`.
    pub fn seq2img(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("seq2img expects [N,L,C], got {:?}", s));
        }
        let (n, l, ch) = (s[0], s[1], s[2]);
        if l != h * w {
            return Err(dim_err!("seq2img: {l} tokens cannot form a {h}x{w} grid"));
        }
        let out = transpose_last2(self.value(x).data(), n, l, ch);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, ch, h, w], out)?, Op::Seq2Img(x), rg))
    }

    /// `[N,L,D]` to `[N·heads, L, D/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(dim_err!("cannot split {:?} into {heads} heads", s));
        }
        let (n, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for t in 0..l {
                for h in 0..heads {
                    let from = (b * l + t) * d + h * dh;
                    let to = ((b * heads + h) * l + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[n * heads, l, dh], out)?,
            Op::SplitHeads(x, heads),
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(dim_err!("cannot merge {:?} over {heads} heads", s));
        }
        let (n, l, dh) = (s[0] / heads, s[1], s[2]);
        let d = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for t in 0..l {
                for h in 0..heads {
                    let to = (b * l + t) * d + h * dh;
                    let from = ((b * heads + h) * l + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, l, d], out)?, Op::MergeHeads(x, heads), rg))
    }

    /// Spatial average of an NCHW map, giving `[N,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(dim_err!("mean_spatial expects non-empty NCHW, got {:?}", s));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / c(plane as f64);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1]], out)?, Op::MeanSpatial(x), rg))
    }

    /// Repeats a tensor with leading dimension 1 `times` times along axis 0.
    pub fn tile0(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first() != Some(&1) {
            return Err(dim_err!("tile0 expects a leading dimension of 1, got {:?}", s));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let mut shape = s;
        shape[0] = times;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Tile0(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err!(
                "cross_entropy: logits {:?} with {} labels",
                s,
                labels.len()
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let loss = loss / c(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element root. Gradients of leaves (and of nodes
    /// marked with [`Graph::retain_grad`]) are accumulated, so repeated calls add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward root is not on this graph".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, contrib) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) || node.retain {
                match &mut node.grad {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::AddBroadcast(a, b) => {
                res.push((*a, g.to_vec()));
                if self.rg(*b) {
                    let m = self.value(*b).numel().max(1);
                    let mut gb = vec![T::zero(); m];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % m] += gv;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    res.push((*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect()));
                }
                if self.rg(*b) {
                    res.push((*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|&x| x * *s).collect())),
            Op::Sum(a) => res.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                res.push((*a, vec![g[0] / c(n as f64); n]));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_acc(&mut ga, g, self.value(*b).data(), m, n, k, false, true);
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_acc(&mut gb, self.value(*a).data(), g, k, m, n, true, false);
                    res.push((*b, gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    // trans_b: dA = dC · B ; otherwise dA = dC · Bᵀ
                    bgemm_acc(&mut ga, g, vb, batch, m, n, k, false, !trans_b);
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        bgemm_acc(&mut gb, g, va, batch, n, m, k, true, false);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        bgemm_acc(&mut gb, va, g, batch, k, m, n, true, false);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = g.len() / n.max(1);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm_acc(&mut gx, g, self.value(*w).data(), m, n, k, false, true);
                    res.push((*x, gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm_acc(&mut gw, self.value(*x).data(), g, k, m, n, true, false);
                    res.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        res.push((*b, gb));
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                if self.rg(*x) {
                    res.push((*x, conv::backward_input(g, self.value(*w).data(), dims)));
                }
                if self.rg(*w) {
                    res.push((*w, conv::backward_weight(g, self.value(*x).data(), dims)));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        res.push((*b, conv::backward_bias(g, dims)));
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("softmax dim");
                let mut gx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in out.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let inv_d = T::one() / c(d as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, ((xr, gr), dr)) in xv
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let (m, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - m) * rs;
                        dxhat[j] = gr[j] * gm[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (s1, s2) = (s1 * inv_d, s2 * inv_d);
                    for j in 0..d {
                        dr[j] = rs * (dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                if self.corrupt_backward {
                    gg.iter_mut().for_each(|v| *v *= c(1.01));
                }
                res.push((*x, gx));
                res.push((*gamma, gg));
                res.push((*beta, gb));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                train,
            } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (n, ch, plane) = (s[0], s[1], s[2] * s[3]);
                let xd = xv.data();
                let gm = self.value(*gamma).data();
                let inv = T::one() / c((n * plane) as f64);
                let mut gx = vec![T::zero(); xd.len()];
                let mut gg = vec![T::zero(); ch];
                let mut gb = vec![T::zero(); ch];
                for cidx in 0..ch {
                    let (m, rs) = (mean[cidx], rstd[cidx]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..n {
                        let r = (b * ch + cidx) * plane..(b * ch + cidx + 1) * plane;
                        for (&gv, &a) in g[r.clone()].iter().zip(&xd[r]) {
                            sum_g += gv;
                            sum_gx += gv * (a - m) * rs;
                        }
                    }
                    gg[cidx] = sum_gx;
                    gb[cidx] = sum_g;
                    let scale = gm[cidx] * rs;
                    for b in 0..n {
                        let r = (b * ch + cidx) * plane..(b * ch + cidx + 1) * plane;
                        for ((o, &gv), &a) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r])
                        {
                            *o = if *train {
                                let xh = (a - m) * rs;
                                scale * (gv - sum_g * inv - xh * sum_gx * inv)
                            } else {
                                scale * gv
                            };
                        }
                    }
                }
                res.push((*x, gx));
                res.push((*gamma, gg));
                res.push((*beta, gb));
            }
            Op::Activation(x, kind) => {
                let xv = self.value(*x).data();
                res.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &a)| gv * kind.derivative(a))
                        .collect(),
                ));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gv.extend_from_slice(&g[base..base + len]);
                        }
                        res.push((v, gv));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, inner) = outer_inner(sx, *axis);
                let len = node.value.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * sx[*axis] + start) * inner;
                    gx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                res.push((*x, gx));
            }
            Op::Img2Seq(x) => {
                let s = node.value.shape();
                res.push((*x, transpose_last2(g, s[0], s[1], s[2])));
            }
            Op::Seq2Img(x) => {
                let s = node.value.shape();
                res.push((*x, transpose_last2(g, s[0], s[1], s[2] * s[3])));
            }
            Op::SplitHeads(x, heads) => {
                let s = self.shape(*x);
                let (n, l, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for t in 0..l {
                        for h in 0..*heads {
                            let to = (b * l + t) * d + h * dh;
                            let from = ((b * heads + h) * l + t) * dh;
                            gx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::MergeHeads(x, heads) => {
                let s = node.value.shape();
                let (n, l, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for t in 0..l {
                        for h in 0..*heads {
                            let from = (b * l + t) * d + h * dh;
                            let to = ((b * heads + h) * l + t) * dh;
                            gx[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = T::one() / c(plane as f64);
                let mut gx = Vec::with_capacity(g.len() * plane);
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                res.push((*x, gx));
            }
            Op::Tile0(x) => {
                let m = self.value(*x).numel();
                let mut gx = vec![T::zero(); m];
                for chunk in g.chunks(m.max(1)) {
                    gx.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                res.push((*x, gx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / c(labels.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    gx[r * k + label] -= scale;
                }
                res.push((*logits, gx));
            }
        }
        res
    }
}

/// `[n, a, b]` to `[n, b, a]`.
fn transpose_last2<T: Float>(src: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..n {
        let s = &src[bi * a * b..(bi + 1) * a * b];
        let o = &mut out[bi * a * b..(bi + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                o[j * a + i] = s[i * b + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
