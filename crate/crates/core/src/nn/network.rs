use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{Activation, LayerKind, NetworkSpec};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Whether a forward pass registers parameters as gradient-receiving leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    pub taps: Vec<(String, Var)>,
    /// Parameter leaves in network order.
    pub params: Vec<Var>,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Spec(format!("forward pass produced no tap {name:?}")))
    }
}

/// A [`NetworkSpec`] with instantiated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    pub id: String,
    spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
}

/// Parameter shapes implied by a spec, with names, in forward order.
pub fn param_layout(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
    let shapes = spec.infer_shapes()?;
    let mut prev = spec.input.to_vec();
    let mut out = Vec::new();
    for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
        match layer.kind {
            LayerKind::Conv { channels, kernel, .. } => {
                out.push((format!("l{i}.weight"), vec![channels, prev[0], kernel, kernel]));
                out.push((format!("l{i}.bias"), vec![channels]));
            }
            LayerKind::Deconv { channels, kernel, .. } => {
                out.push((format!("l{i}.weight"), vec![prev[0], channels, kernel, kernel]));
                out.push((format!("l{i}.bias"), vec![channels]));
            }
            LayerKind::Dense { units } => {
                out.push((format!("l{i}.weight"), vec![units, prev[0]]));
                out.push((format!("l{i}.bias"), vec![units]));
            }
            LayerKind::ResidualBlock { channels: c, norm } => {
                for half in ["a", "b"] {
                    out.push((format!("l{i}.{half}.weight"), vec![c, c, 3, 3]));
                    out.push((format!("l{i}.{half}.bias"), vec![c]));
                    if norm {
                        out.push((format!("l{i}.{half}.gamma"), vec![c]));
                        out.push((format!("l{i}.{half}.beta"), vec![c]));
                    }
                }
            }
            LayerKind::Norm => {
                out.push((format!("l{i}.gamma"), vec![prev[0]]));
                out.push((format!("l{i}.beta"), vec![prev[0]]));
            }
            LayerKind::Activation(_) | LayerKind::Flatten | LayerKind::GlobalAvgPool => {}
        }
        prev = shape.clone();
    }
    Ok(out)
}

impl<S: Scalar> Network<S> {
    /// Validates the spec and allocates parameters with the default
    /// initialization drawn from `seed`.
    pub fn new(id: &str, spec: NetworkSpec, seed: u64) -> Result<Self> {
        let layout = param_layout(&spec)?;
        let mut net = Self {
            id: id.to_string(),
            spec,
            names: layout.iter().map(|(n, _)| n.clone()).collect(),
            params: layout
                .iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect::<Result<_>>()?,
        };
        net.init_params(seed);
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Fan-in scaled uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`),
    /// zero biases, unit norm scales. The last normalization of every
    /// residual block starts at scale zero (the last conv, when the block
    /// has no normalization), so each block starts as the identity map.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = 0;
        for layer in self.spec.layers.clone() {
            match layer.kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                    let fan_in: usize = self.params[idx].shape()[1..].iter().product();
                    self.uniform(idx, fan_in as f64, &mut rng);
                    self.params[idx + 1].data_mut().fill(S::zero());
                    idx += 2;
                }
                LayerKind::Deconv { stride, kernel, .. } => {
                    // each output pixel sees cin * k^2 / stride^2 taps on average
                    let cin = self.params[idx].shape()[0];
                    let fan_in = (cin * kernel * kernel) as f64 / (stride * stride) as f64;
                    self.uniform(idx, fan_in.max(1.0), &mut rng);
                    self.params[idx + 1].data_mut().fill(S::zero());
                    idx += 2;
                }
                LayerKind::ResidualBlock { channels, norm } => {
                    let fan_in = (channels * 9) as f64;
                    for half in 0..2 {
                        self.uniform(idx, fan_in, &mut rng);
                        self.params[idx + 1].data_mut().fill(S::zero());
                        idx += 2;
                        if norm {
                            let gamma = if half == 1 { S::zero() } else { S::one() };
                            self.params[idx].data_mut().fill(gamma);
                            self.params[idx + 1].data_mut().fill(S::zero());
                            idx += 2;
                        } else if half == 1 {
                            self.params[idx - 2].data_mut().fill(S::zero());
                        }
                    }
                }
                LayerKind::Norm => {
                    self.params[idx].data_mut().fill(S::one());
                    self.params[idx + 1].data_mut().fill(S::zero());
                    idx += 2;
                }
                _ => {}
            }
        }
        debug_assert_eq!(idx, self.params.len());
    }

    fn uniform(&mut self, idx: usize, fan_in: f64, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / fan_in).sqrt();
        let t = Tensor::rand_uniform(self.params[idx].shape(), -bound, bound, rng).unwrap();
        self.params[idx] = t;
    }

    /// Replaces every parameter, checking shapes.
    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        if params.len() != self.params.len() {
            return shape_err("set_params", format!("{} tensors for {}", params.len(), self.params.len()));
        }
        for (new, old) in params.iter().zip(&self.params) {
            if new.shape() != old.shape() {
                return shape_err("set_params", format!("{:?} vs {:?}", new.shape(), old.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Registers the parameters on `g` once, so several forward passes can
    /// share (and accumulate gradients into) the same leaves.
    pub fn register(&self, g: &mut Graph<S>, mode: ParamMode) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| match mode {
                ParamMode::Trainable => g.param(p.clone()),
                ParamMode::Frozen => g.constant(p.clone()),
            })
            .collect()
    }

    /// Runs every layer.
    pub fn forward(&self, g: &mut Graph<S>, x: Var, mode: ParamMode) -> Result<Forward> {
        let params = self.register(g, mode);
        self.run(g, x, params, None)
    }

    /// Runs every layer with parameters previously returned by [`Network::register`].
    pub fn forward_with(&self, g: &mut Graph<S>, x: Var, params: &[Var]) -> Result<Forward> {
        if params.len() != self.params.len() {
            return shape_err("network", format!("{} parameter handles for {}", params.len(), self.params.len()));
        }
        self.run(g, x, params.to_vec(), None)
    }

    /// Runs layers up to and including the one carrying `tap`.
    pub fn forward_until(&self, g: &mut Graph<S>, x: Var, params: &[Var], tap: &str) -> Result<Forward> {
        if !self.spec.tap_names().contains(&tap) {
            return Err(Error::Spec(format!("{} has no tap {tap:?}", self.id)));
        }
        if params.len() != self.params.len() {
            return shape_err("network", format!("{} parameter handles for {}", params.len(), self.params.len()));
        }
        self.run(g, x, params.to_vec(), Some(tap))
    }

    /// Frozen forward on a fresh tape, returning the output value.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv, ParamMode::Frozen)?;
        Ok(g.value(f.output).clone())
    }

    fn run(&self, g: &mut Graph<S>, x: Var, params: Vec<Var>, stop: Option<&str>) -> Result<Forward> {
        let shape = g.shape(x);
        let sample = if shape.len() == 4 { &shape[1..] } else { shape };
        if sample != self.spec.input {
            return shape_err(
                "network",
                format!("{} expects {:?} samples, got {:?}", self.id, self.spec.input, shape),
            );
        }
        let mut taps = Vec::new();
        let mut h = x;
        let mut idx = 0;
        for layer in &self.spec.layers {
            h = match layer.kind {
                LayerKind::Conv { pad, stride, .. } => {
                    idx += 2;
                    g.conv2d(h, params[idx - 2], Some(params[idx - 1]), pad, stride)?
                }
                LayerKind::Deconv {
                    pad, stride, out_pad, ..
                } => {
                    idx += 2;
                    g.conv_transpose2d(h, params[idx - 2], Some(params[idx - 1]), pad, stride, out_pad)?
                }
                LayerKind::Dense { .. } => {
                    idx += 2;
                    g.dense(h, params[idx - 2], Some(params[idx - 1]))?
                }
                LayerKind::ResidualBlock { norm, .. } => {
                    let mut r = h;
                    for half in 0..2 {
                        r = g.conv2d(r, params[idx], Some(params[idx + 1]), 1, 1)?;
                        idx += 2;
                        if norm {
                            r = g.instance_norm(r, params[idx], params[idx + 1], NORM_EPS)?;
                            idx += 2;
                        }
                        if half == 0 {
                            r = g.relu(r)?;
                        }
                    }
                    g.add(h, r)?
                }
                LayerKind::Activation(Activation::Relu) => g.relu(h)?,
                LayerKind::Activation(Activation::LeakyRelu(s)) => g.leaky_relu(h, s)?,
                LayerKind::Activation(Activation::Sigmoid) => g.sigmoid(h)?,
                LayerKind::Norm => {
                    idx += 2;
                    g.instance_norm(h, params[idx - 2], params[idx - 1], NORM_EPS)?
                }
                LayerKind::Flatten => g.flatten(h)?,
                LayerKind::GlobalAvgPool => g.spatial_mean(h)?,
            };
            if let Some(name) = &layer.tap {
                taps.push((name.clone(), h));
                if stop == Some(name.as_str()) {
                    break;
                }
            }
        }
        Ok(Forward {
            output: h,
            taps,
            params,
        })
    }

    /// Parameter gradients left on `g` by the last backward pass; parameters
    /// that received none contribute zeros.
    pub fn grads(&self, g: &Graph<S>, params: &[Var]) -> Gradients<S> {
        Gradients {
            tensors: params
                .iter()
                .zip(&self.params)
                .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape()).unwrap()))
                .collect(),
        }
    }
}
