//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a gradient tape: every op appends a node holding its
//! output value and the rule to push gradients back to its inputs. Nodes are
//! referred to by [`Var`] handles. [`Graph::backward`] replays the tape in
//! reverse from a scalar root, visiting each node once, and leaves gradients
//! on every node that requires one.
//!
//! ```
//! use diat_core::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = g.frobenius_sq(x).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvShape, Plane};
use crate::scalar::Scalar;
use crate::tensor::{image_dims, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvShape,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvShape,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        k: usize,
        m: usize,
    },
    Relu(Var),
    LeakyRelu(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    Square(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    LogClamped(Var, S),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        channels: usize,
        spatial: usize,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        n: usize,
        ca: usize,
        cb: usize,
        spatial: usize,
    },
    Reshape(Var),
    Blur {
        x: Var,
        kernel: Vec<S>,
        h: usize,
        w: usize,
    },
    SpatialMean {
        x: Var,
        spatial: usize,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<S>,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "conv_transpose2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::FrobeniusSq(_) => "frobenius_sq",
            Op::LogClamped(..) => "log",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Reshape(_) => "reshape",
            Op::Blur { .. } => "gaussian_blur",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient tape. See the module docs.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// When enabled, every op rejects non-finite outputs with
    /// [`Error::NonFinite`].
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape(), data.clone()).ok()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- convolutions --------------------------------------------------

    /// 2-D convolution with zero padding. `weight` is `[C_out, C_in, kH, kW]`,
    /// `bias` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, pad: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = image_dims(self.shape(x))?;
        let &[cout, cin, kh, kw] = self.shape(weight) else {
            return shape_err("conv2d", format!("weight must be rank 4, got {:?}", self.shape(weight)));
        };
        if cin != c {
            return shape_err("conv2d", format!("weight expects {cin} input channels, input has {c}"));
        }
        self.check_bias("conv2d", bias, cout)?;
        if stride == 0 {
            return invalid("conv2d", "stride must be >= 1");
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_extent(h, kh, pad, stride),
            kernels::conv_out_extent(w, kw, pad, stride),
        ) else {
            return invalid("conv2d", format!("{kh}x{kw} kernel does not fit {h}x{w} with pad {pad}"));
        };
        let geom = ConvShape {
            n,
            input: Plane { c, h, w },
            output: Plane { c: cout, h: oh, w: ow },
            kh,
            kw,
            pad,
            stride,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let shape = self.image_shape_like(x, cout, oh, ow);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w: weight, b: bias, geom }, &inputs)
    }

    /// Transposed convolution. `weight` is `[C_in, C_out, kH, kW]`; the output
    /// extent is `(H - 1) * stride + kH - 2 * pad + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        stride: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = image_dims(self.shape(x))?;
        let &[cin, cout, kh, kw] = self.shape(weight) else {
            return shape_err(
                "conv_transpose2d",
                format!("weight must be rank 4, got {:?}", self.shape(weight)),
            );
        };
        if cin != c {
            return shape_err(
                "conv_transpose2d",
                format!("weight expects {cin} input channels, input has {c}"),
            );
        }
        if stride == 0 || out_pad >= stride {
            return invalid(
                "conv_transpose2d",
                format!("need 0 <= out_pad < stride, got out_pad {out_pad}, stride {stride}"),
            );
        }
        self.check_bias("conv_transpose2d", bias, cout)?;
        let (Some(oh), Some(ow)) = (
            kernels::deconv_out_extent(h, kh, pad, stride, out_pad),
            kernels::deconv_out_extent(w, kw, pad, stride, out_pad),
        ) else {
            return invalid("conv_transpose2d", "padding leaves an empty output");
        };
        let geom = ConvShape {
            n,
            input: Plane { c, h, w },
            output: Plane { c: cout, h: oh, w: ow },
            kh,
            kw,
            pad,
            stride,
        };
        let out = kernels::deconv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let shape = self.image_shape_like(x, cout, oh, ow);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Tensor::new(&shape, out)?, Op::Deconv2d { x, w: weight, b: bias, geom }, &inputs)
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return shape_err(op, format!("bias {:?} for {channels} outputs", self.shape(b)));
            }
        }
        Ok(())
    }

    fn image_shape_like(&self, x: Var, c: usize, h: usize, w: usize) -> Vec<usize> {
        match self.shape(x) {
            [n, _, _, _] => vec![*n, c, h, w],
            _ => vec![c, h, w],
        }
    }

    /// Fully connected layer: `out = weight * input + bias` for `[K]` or
    /// `[N, K]` inputs; `weight` is `[M, K]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, k, batched) = match *self.shape(x) {
            [k] => (1, k, false),
            [n, k] => (n, k, true),
            ref s => return shape_err("dense", format!("input must be [K] or [N,K], got {s:?}")),
        };
        let &[m, kw] = self.shape(weight) else {
            return shape_err("dense", format!("weight must be [M,K], got {:?}", self.shape(weight)));
        };
        if kw != k {
            return shape_err("dense", format!("weight expects {kw} inputs, got {k}"));
        }
        self.check_bias("dense", bias, m)?;
        let mut out = vec![S::zero(); n * m];
        S::gemm(
            n,
            k,
            m,
            S::one(),
            self.value(x).data(),
            (k as isize, 1),
            self.value(weight).data(),
            (1, k as isize),
            S::zero(),
            &mut out,
            (m as isize, 1),
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
            }
        }
        let shape = if batched { vec![n, m] } else { vec![m] };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Tensor::new(&shape, out)?, Op::Dense { x, w: weight, b: bias, n, k, m }, &inputs)
    }

    // ---- elementwise ---------------------------------------------------

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = S::lit(slope);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v > S::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |v| S::one() / (S::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (a, b) = (S::lit(scale), S::lit(shift));
        self.unary(x, Op::Affine(x, a), move |v| a * v + b)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// `ln(clamp(x, eps, 1 - eps))`; zero gradient where clamped.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let e = S::lit(eps);
        let hi = S::one() - e;
        self.unary(x, Op::LogClamped(x, e), move |v| v.max(e).min(hi).ln())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / S::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(S::zero(), |a, &v| a + v * v);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(x), &[x])
    }

    /// Mean over the spatial extent: `[N,C,H,W] -> [N,C]`, `[C,H,W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = image_dims(self.shape(x))?;
        let spatial = h * w;
        let inv = S::one() / S::from_usize(spatial).unwrap();
        let data: Vec<S> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().fold(S::zero(), |a, &v| a + v) * inv)
            .collect();
        let shape = if self.shape(x).len() == 4 { vec![n, c] } else { vec![c] };
        self.push(Tensor::new(&shape, data)?, Op::SpatialMean { x, spatial }, &[x])
    }

    /// Mean cross-entropy of `softmax(logits)` against integer class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, classes) = match *self.shape(logits) {
            [k] => (1, k),
            [n, k] => (n, k),
            ref s => return shape_err("softmax_cross_entropy", format!("logits {s:?}")),
        };
        if labels.len() != n {
            return shape_err("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return invalid("softmax_cross_entropy", format!("label {bad} >= {classes} classes"));
        }
        let mut probs = Vec::with_capacity(n * classes);
        let mut loss = S::zero();
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
            let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            let z = exps.iter().fold(S::zero(), |a, &v| a + v);
            loss += z.ln() - (row[label] - max);
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let loss = loss / S::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
            &[logits],
        )
    }

    // ---- structure -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C*H*W]` (rank-3 input flattens to `[C*H*W]`).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let new = match shape.len() {
            4 => vec![shape[0], shape[1..].iter().product()],
            _ => vec![shape.iter().product()],
        };
        self.reshape(x, &new)
    }

    /// Channel concatenation of two images with equal batch and spatial size.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = image_dims(self.shape(a))?;
        let (nb, cb, hb, wb) = image_dims(self.shape(b))?;
        if (na, ha, wa) != (nb, hb, wb) || self.shape(a).len() != self.shape(b).len() {
            return shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let spatial = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * spatial);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for s in 0..na {
            data.extend_from_slice(&va[s * ca * spatial..(s + 1) * ca * spatial]);
            data.extend_from_slice(&vb[s * cb * spatial..(s + 1) * cb * spatial]);
        }
        let shape = self.image_shape_like(a, ca + cb, ha, wa);
        self.push(
            Tensor::new(&shape, data)?,
            Op::ConcatChannels {
                a,
                b,
                n: na,
                ca,
                cb,
                spatial,
            },
            &[a, b],
        )
    }

    /// Per-sample, per-channel normalization over the spatial extent followed
    /// by a learned per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, c, h, w) = image_dims(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("instance_norm", format!("affine params must be [{c}]"));
        }
        let spatial = h * w;
        let m = S::from_usize(spatial).unwrap();
        let eps = S::lit(eps);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / spatial);
        let mut out = Vec::with_capacity(xv.len());
        for (i, plane) in xv.chunks(spatial).enumerate() {
            let mean = plane.iter().fold(S::zero(), |a, &v| a + v) / m;
            let var = plane.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / m;
            let is = S::one() / (var + eps).sqrt();
            let (g, b) = (gv[i % c], bv[i % c]);
            for &v in plane {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(g * xh + b);
            }
            inv_std.push(is);
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                spatial,
            },
            &[x, gamma, beta],
        )
    }

    /// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, renormalized to
    /// sum one, reflected at the borders.
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return invalid("gaussian_blur", format!("sigma must be > 0, got {sigma}"));
        }
        let (_, _, h, w) = image_dims(self.shape(x))?;
        let kernel: Vec<S> = kernels::gaussian_kernel(sigma).into_iter().map(S::lit).collect();
        let out = kernels::blur_planes(self.value(x).data(), h, w, &kernel, false);
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::Blur { x, kernel, h, w }, &[x])
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a single-element `root`. Gradients from any
    /// previous call are discarded first; fan-out contributions are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            );
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    f: impl FnOnce() -> Vec<S>,
) {
    if nodes[v.0].requires_grad {
        let c = f();
        accumulate(nodes, grads, v, c);
    }
}

fn propagate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let need = (needs(*x), needs(*w), b.is_some_and(needs));
            let grads_out = kernels::conv2d_backward(val(*x), val(*w), g, *geom, need);
            push_conv_grads(nodes, grads, (*x, *w, *b), grads_out);
        }
        Op::Deconv2d { x, w, b, geom } => {
            let need = (needs(*x), needs(*w), b.is_some_and(needs));
            let grads_out = kernels::deconv2d_backward(val(*x), val(*w), g, *geom, need);
            push_conv_grads(nodes, grads, (*x, *w, *b), grads_out);
        }
        &Op::Dense { x, w, b, n, k, m } => {
            accumulate_with(nodes, grads, x, || {
                let mut dx = vec![S::zero(); n * k];
                S::gemm(n, m, k, S::one(), g, (m as isize, 1), val(w), (k as isize, 1), S::zero(), &mut dx, (k as isize, 1));
                dx
            });
            accumulate_with(nodes, grads, w, || {
                let mut dw = vec![S::zero(); m * k];
                S::gemm(m, n, k, S::one(), g, (1, m as isize), val(x), (k as isize, 1), S::zero(), &mut dw, (k as isize, 1));
                dw
            });
            if let Some(b) = b {
                accumulate_with(nodes, grads, b, || {
                    let mut db = vec![S::zero(); m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    db
                });
            }
        }
        &Op::Relu(x) => accumulate_with(nodes, grads, x, || {
            val(x).iter().zip(g).map(|(&v, &d)| if v > S::zero() { d } else { S::zero() }).collect()
        }),
        &Op::LeakyRelu(x, s) => accumulate_with(nodes, grads, x, || {
            val(x).iter().zip(g).map(|(&v, &d)| if v > S::zero() { d } else { d * s }).collect()
        }),
        &Op::Sigmoid(x) => accumulate_with(nodes, grads, x, || {
            node.value.data().iter().zip(g).map(|(&y, &d)| d * y * (S::one() - y)).collect()
        }),
        &Op::Tanh(x) => accumulate_with(nodes, grads, x, || {
            node.value.data().iter().zip(g).map(|(&y, &d)| d * (S::one() - y * y)).collect()
        }),
        &Op::Add(a, b) => {
            accumulate_with(nodes, grads, a, || g.to_vec());
            accumulate_with(nodes, grads, b, || g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate_with(nodes, grads, a, || g.to_vec());
            accumulate_with(nodes, grads, b, || g.iter().map(|&d| -d).collect());
        }
        &Op::Mul(a, b) => {
            accumulate_with(nodes, grads, a, || val(b).iter().zip(g).map(|(&y, &d)| y * d).collect());
            accumulate_with(nodes, grads, b, || val(a).iter().zip(g).map(|(&y, &d)| y * d).collect());
        }
        &Op::Affine(x, a) => accumulate_with(nodes, grads, x, || g.iter().map(|&d| a * d).collect()),
        &Op::Square(x) => accumulate_with(nodes, grads, x, || {
            val(x).iter().zip(g).map(|(&v, &d)| S::lit(2.0) * v * d).collect()
        }),
        &Op::Sum(x) => accumulate_with(nodes, grads, x, || vec![g[0]; val(x).len()]),
        &Op::Mean(x) => accumulate_with(nodes, grads, x, || {
            let n = val(x).len();
            vec![g[0] / S::from_usize(n).unwrap(); n]
        }),
        &Op::FrobeniusSq(x) => accumulate_with(nodes, grads, x, || {
            let two = S::lit(2.0) * g[0];
            val(x).iter().map(|&v| two * v).collect()
        }),
        &Op::LogClamped(x, e) => accumulate_with(nodes, grads, x, || {
            let hi = S::one() - e;
            val(x)
                .iter()
                .zip(g)
                .map(|(&v, &d)| if v >= e && v <= hi { d / v } else { S::zero() })
                .collect()
        }),
        Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            spatial,
        } => {
            let (c, sp) = (*channels, *spatial);
            let gv = val(*gamma);
            if needs(*gamma) || needs(*beta) {
                let mut dg = vec![S::zero(); c];
                let mut db = vec![S::zero(); c];
                for (p, (gp, xp)) in g.chunks(sp).zip(xhat.chunks(sp)).enumerate() {
                    for (&d, &xh) in gp.iter().zip(xp) {
                        dg[p % c] += d * xh;
                        db[p % c] += d;
                    }
                }
                accumulate(nodes, grads, *gamma, dg);
                accumulate(nodes, grads, *beta, db);
            }
            accumulate_with(nodes, grads, *x, || {
                let m = S::from_usize(sp).unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (p, (gp, xp)) in g.chunks(sp).zip(xhat.chunks(sp)).enumerate() {
                    let gam = gv[p % c];
                    let sum_d = gp.iter().fold(S::zero(), |a, &d| a + d * gam);
                    let sum_dx = gp.iter().zip(xp).fold(S::zero(), |a, (&d, &xh)| a + d * gam * xh);
                    let k = inv_std[p] / m;
                    for (&d, &xh) in gp.iter().zip(xp) {
                        dx.push(k * (m * d * gam - sum_d - xh * sum_dx));
                    }
                }
                dx
            });
        }
        &Op::ConcatChannels { a, b, n, ca, cb, spatial } => {
            let (la, lb) = (ca * spatial, cb * spatial);
            accumulate_with(nodes, grads, a, || {
                (0..n).flat_map(|s| g[s * (la + lb)..s * (la + lb) + la].iter().copied()).collect()
            });
            accumulate_with(nodes, grads, b, || {
                (0..n).flat_map(|s| g[s * (la + lb) + la..(s + 1) * (la + lb)].iter().copied()).collect()
            });
        }
        &Op::Reshape(x) => accumulate_with(nodes, grads, x, || g.to_vec()),
        Op::Blur { x, kernel, h, w } => {
            accumulate_with(nodes, grads, *x, || kernels::blur_planes(g, *h, *w, kernel, true))
        }
        &Op::SpatialMean { x, spatial } => accumulate_with(nodes, grads, x, || {
            let inv = S::one() / S::from_usize(spatial).unwrap();
            g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, spatial)).collect()
        }),
        Op::SoftmaxXent {
            logits,
            probs,
            labels,
            classes,
        } => accumulate_with(nodes, grads, *logits, || {
            let n = labels.len();
            let scale = g[0] / S::from_usize(n).unwrap();
            let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * classes + l] -= scale;
            }
            d
        }),
    }
}

fn push_conv_grads<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    (x, w, b): (Var, Var, Option<Var>),
    out: kernels::ConvGrads<S>,
) {
    if let Some(dx) = out.dx {
        accumulate(nodes, grads, x, dx);
    }
    if let Some(dw) = out.dw {
        accumulate(nodes, grads, w, dw);
    }
    if let (Some(b), Some(db)) = (b, out.db) {
        accumulate(nodes, grads, b, db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1], &[3.5]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[3, 8, 8]).unwrap());
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]).unwrap());
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv2d_hand_computed() {
        // 3x3 input, 2x2 kernel of ones, no pad: window sums
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1., 1., 1., 1.]));
        let y = g.conv2d(x, w, None, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn deconv_rejects_out_pad_at_stride() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
        assert!(g.conv_transpose2d(x, w, None, 1, 2, 2).is_err());
        assert!(g.conv_transpose2d(x, w, None, 1, 2, 1).is_ok());
    }

    #[test]
    fn deconv_unit_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2], &[1., -2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.]));
        let y = g.conv_transpose2d(x, w, None, 0, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn dense_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3., -4.]));
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let zero = g.constant(t(&[2], &[0., 0.]));
        let y = g.dense(x, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y).data(), &[3., -4.]);

        let x3 = g.constant(t(&[3], &[1., 2., 3.]));
        let w = g.constant(t(&[2, 3], &[1., 0., -1., 2., 1., 0.5]));
        let b = g.constant(t(&[2], &[0.5, -1.]));
        let y = g.dense(x3, w, Some(b)).unwrap();
        // [1-3+0.5, 2+2+1.5-1]
        assert_eq!(g.value(y).data(), &[-1.5, 4.5]);
    }

    #[test]
    fn dense_rejects_length_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[4]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(g.dense(x, w, None).is_err());
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(t(&[1], &[0.]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let m = g.constant(t(&[1], &[-2.]));
        let l = g.leaky_relu(m, 0.2).unwrap();
        assert!((g.value(l).data()[0] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[2, 2]).unwrap());
        let f = g.frobenius_sq(ones).unwrap();
        assert_eq!(g.value(f).item(), 4.0);
        let v = g.constant(t(&[3], &[1., 2., 3.]));
        let m = g.mean(v).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn mismatched_elementwise_shapes_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]).unwrap());
        let b = g.constant(Tensor::zeros(&[3]).unwrap());
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn backward_of_frobenius() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let f = g.frobenius_sq(x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1., 2.]));
        let x = g.param(t(&[2], &[3., 4.]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[5.]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn finite_check_mode() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.affine(x, 10.0, 0.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]).unwrap());
        assert!(g.gaussian_blur(x, 0.0).is_err());
        assert!(g.gaussian_blur(x, -1.0).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5, 7], 0.37).unwrap());
        let y = g.gaussian_blur(x, 1.8).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::zeros(&[2, 4]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }
}
