//! Randomized gradient-check suite over every differentiable op and every
//! loss, run in `f64`.
//!
//! Each case draws small random instances (shapes included) from a seeded
//! generator and compares tape gradients with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check_many;
use crate::graph::{Graph, Var};
use crate::losses::{self, GeneratorLoss, LossConfig};
use crate::nn::{Activation, LayerKind, LayerSpec, Network, NetworkSpec, ParamMode, Scale};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance: inputs and the scalar function of them.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub f: Objective,
}

pub struct Case {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Values bounded away from zero so perturbations never cross a kink.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng).unwrap()
}

/// `sum(x * r)` with a fixed random `r`, turning any tensor into a generic
/// scalar readout.
fn readout(g: &mut Graph<f64>, x: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(x, r)?;
    g.sum(p)
}

fn image(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6)]
}

/// An elementwise unary op applied to a random image, read out with weights.
fn unary_instance(rng: &mut ChaCha8Rng, lo: f64, hi: f64, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Instance {
    let shape = image(rng);
    let x = if lo < 0.0 && hi > 0.0 {
        signed(rng, &shape)
    } else {
        uniform(rng, &shape, lo, hi)
    };
    let r = signed(rng, &shape);
    Instance {
        inputs: vec![x],
        f: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            readout(g, y, &r)
        }),
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = rng.gen_range(1..=3);
    let pad = rng.gen_range(0..=k / 2 + 1);
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(k.max(3)..=6);
    let w = rng.gen_range(k.max(3)..=6);
    let x = signed(rng, &[n, cin, h, w]);
    let wt = signed(rng, &[cout, cin, k, k]);
    let b = signed(rng, &[cout]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let r = signed(rng, &[n, cout, oh, ow]);
    Instance {
        inputs: vec![x, wt, b],
        f: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), pad, stride)?;
            readout(g, y, &r)
        }),
    }
}

fn deconv_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = rng.gen_range(1..=4);
    let stride = rng.gen_range(1..=2);
    let out_pad = rng.gen_range(0..stride);
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let pad = rng.gen_range(0..=(k - 1) / 2);
    let x = signed(rng, &[n, cin, h, w]);
    let wt = signed(rng, &[cin, cout, k, k]);
    let b = signed(rng, &[cout]);
    let oh = (h - 1) * stride + k + out_pad - 2 * pad;
    let ow = (w - 1) * stride + k + out_pad - 2 * pad;
    let r = signed(rng, &[n, cout, oh, ow]);
    Instance {
        inputs: vec![x, wt, b],
        f: Box::new(move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), pad, stride, out_pad)?;
            readout(g, y, &r)
        }),
    }
}

fn dense_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k, m) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=4));
    let x = signed(rng, &[n, k]);
    let wt = signed(rng, &[m, k]);
    let b = signed(rng, &[m]);
    let r = signed(rng, &[n, m]);
    Instance {
        inputs: vec![x, wt, b],
        f: Box::new(move |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            readout(g, y, &r)
        }),
    }
}

fn binary_case(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Instance {
    let shape = image(rng);
    let a = signed(rng, &shape);
    let b = signed(rng, &shape);
    let r = signed(rng, &shape);
    Instance {
        inputs: vec![a, b],
        f: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            readout(g, y, &r)
        }),
    }
}

fn reduction_case(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Instance {
    let shape = image(rng);
    let x = signed(rng, &shape);
    Instance {
        inputs: vec![x],
        f: Box::new(move |g, v| op(g, v[0])),
    }
}

fn instance_norm_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = image(rng);
    let c = shape[1];
    let x = signed(rng, &shape);
    let gamma = signed(rng, &[c]);
    let beta = signed(rng, &[c]);
    let r = signed(rng, &shape);
    Instance {
        inputs: vec![x, gamma, beta],
        f: Box::new(move |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, y, &r)
        }),
    }
}

fn blur_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=9), rng.gen_range(3..=9)];
    let sigma = rng.gen_range(0.4..2.0);
    let x = signed(rng, &shape);
    let r = signed(rng, &shape);
    Instance {
        inputs: vec![x],
        f: Box::new(move |g, v| {
            let y = g.gaussian_blur(v[0], sigma)?;
            readout(g, y, &r)
        }),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let a = signed(rng, &[n, ca, h, w]);
    let b = signed(rng, &[n, cb, h, w]);
    let r = signed(rng, &[n, ca + cb, h, w]);
    Instance {
        inputs: vec![a, b],
        f: Box::new(move |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            readout(g, y, &r)
        }),
    }
}

fn spatial_mean_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = image(rng);
    let x = signed(rng, &shape);
    let r = signed(rng, &shape[..2]);
    Instance {
        inputs: vec![x],
        f: Box::new(move |g, v| {
            let y = g.spatial_mean(v[0])?;
            readout(g, y, &r)
        }),
    }
}

fn flatten_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = image(rng);
    let x = signed(rng, &shape);
    let r = signed(rng, &[shape[0], shape[1..].iter().product()]);
    Instance {
        inputs: vec![x],
        f: Box::new(move |g, v| {
            let y = g.flatten(v[0])?;
            readout(g, y, &r)
        }),
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
    let x = signed(rng, &[n, k]);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    Instance {
        inputs: vec![x],
        f: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
    }
}

/// Every differentiable tensor operation.
pub fn op_cases() -> Vec<Case> {
    vec![
        Case { name: "conv2d", build: conv_case },
        Case { name: "conv_transpose2d", build: deconv_case },
        Case { name: "dense", build: dense_case },
        Case { name: "relu", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.relu(x)) },
        Case { name: "leaky_relu", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.leaky_relu(x, 0.2)) },
        Case { name: "sigmoid", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.sigmoid(x)) },
        Case { name: "tanh", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.tanh(x)) },
        Case { name: "square", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.square(x)) },
        Case { name: "affine", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.affine(x, -1.5, 0.25)) },
        Case { name: "mul_scalar", build: |r| unary_instance(r, -1.0, 1.0, |g, x| g.mul_scalar(x, 3.0)) },
        Case { name: "log_clamped", build: |r| unary_instance(r, 0.05, 0.95, |g, x| g.log_clamped(x, 1e-7)) },
        Case { name: "add", build: |r| binary_case(r, |g, a, b| g.add(a, b)) },
        Case { name: "sub", build: |r| binary_case(r, |g, a, b| g.sub(a, b)) },
        Case { name: "mul", build: |r| binary_case(r, |g, a, b| g.mul(a, b)) },
        Case { name: "sum", build: |r| reduction_case(r, |g, x| g.sum(x)) },
        Case { name: "mean", build: |r| reduction_case(r, |g, x| g.mean(x)) },
        Case { name: "frobenius_sq", build: |r| reduction_case(r, |g, x| g.frobenius_sq(x)) },
        Case { name: "spatial_mean", build: spatial_mean_case },
        Case { name: "flatten", build: flatten_case },
        Case { name: "concat_channels", build: concat_case },
        Case { name: "instance_norm", build: instance_norm_case },
        Case { name: "gaussian_blur", build: blur_case },
        Case { name: "softmax_cross_entropy", build: softmax_case },
    ]
}

fn conv_layer(channels: usize, tap: Option<&str>, act: Activation) -> [LayerSpec; 2] {
    let conv = LayerSpec::new(LayerKind::Conv {
        channels,
        kernel: 3,
        pad: 1,
        stride: 1,
    });
    let a = LayerSpec {
        kind: LayerKind::Activation(act),
        tap: tap.map(str::to_string),
    };
    [conv, a]
}

/// A five-conv network with taps `conv1`..`conv5`, shaped like the
/// identity embedder or the discriminator but small enough for
/// finite differences.
fn tiny_tapped_net(res: usize, seed: u64, discriminator: bool) -> Network<f64> {
    let act = if discriminator {
        Activation::LeakyRelu(0.2)
    } else {
        Activation::Relu
    };
    let mut layers = Vec::new();
    for i in 1..=5 {
        layers.extend(conv_layer(3, Some(&format!("conv{i}")), act));
    }
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Dense { units: 1 }));
    if discriminator {
        layers.push(LayerSpec::new(LayerKind::Activation(Activation::Sigmoid)));
    }
    let spec = NetworkSpec {
        input: [3, res, res],
        layers,
        scale: Scale::ONE,
    };
    let mut net = Network::new(if discriminator { "tiny_d" } else { "tiny_phi" }, spec, seed).unwrap();
    // leaky slopes keep every unit alive; biases keep relu units active
    for (name, p) in net.param_names().to_vec().iter().zip(net.params_mut()) {
        if name.ends_with("bias") {
            p.data_mut().iter_mut().for_each(|b| *b = 0.3);
        }
    }
    net
}

fn tiny_denoiser(res: usize, seed: u64) -> Network<f64> {
    crate::nn::build_denoising_net(res, 3, seed).unwrap()
}

const TINY: usize = 4;

fn pair_images(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let n = rng.gen_range(1..=2);
    (
        uniform(rng, &[n, 3, TINY, TINY], 0.05, 0.95),
        uniform(rng, &[n, 3, TINY, TINY], 0.05, 0.95),
    )
}

fn perceptual_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = image(rng);
    Instance {
        inputs: vec![signed(rng, &shape), signed(rng, &shape)],
        f: Box::new(|g, v| losses::perceptual_content_loss(g, v[0], v[1])),
    }
}

fn identity_case(rng: &mut ChaCha8Rng) -> Instance {
    let (xh, x) = pair_images(rng);
    let phi = tiny_tapped_net(TINY, rng.gen(), false);
    let w = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
    Instance {
        inputs: vec![xh, x],
        f: Box::new(move |g, v| losses::identity_loss(g, &phi, v[0], v[1], w)),
    }
}

fn adversarial_d_case(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=4);
    Instance {
        inputs: vec![uniform(rng, &[n, 1], 0.05, 0.95), uniform(rng, &[n, 1], 0.05, 0.95)],
        f: Box::new(|g, v| losses::discriminator_adversarial_loss(g, v[0], v[1])),
    }
}

fn adversarial_t_case(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=4);
    let form = if rng.gen_bool(0.5) {
        GeneratorLoss::Saturating
    } else {
        GeneratorLoss::NonSaturating
    };
    Instance {
        inputs: vec![uniform(rng, &[n, 1], 0.05, 0.95)],
        f: Box::new(move |g, v| losses::generator_adversarial_loss(g, v[0], form)),
    }
}

fn reconstruction_case(rng: &mut ChaCha8Rng) -> Instance {
    let (gx, x) = pair_images(rng);
    let phi = tiny_tapped_net(TINY, rng.gen(), false);
    Instance {
        inputs: vec![gx, x],
        f: Box::new(move |g, v| losses::reconstruction_objective(g, &phi, v[0], v[1], [0.5, 0.5])),
    }
}

/// Denoiser objective with respect to the denoiser's own parameters.
fn denoiser_case(rng: &mut ChaCha8Rng) -> Instance {
    let (gx, x) = pair_images(rng);
    let f = tiny_denoiser(TINY, rng.gen());
    let mut inputs: Vec<Tensor<f64>> = f.params().to_vec();
    inputs.push(gx);
    inputs.push(x);
    let k = f.params().len();
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let a = f.forward_with(g, v[k], &v[..k])?.output;
            let b = f.forward_with(g, v[k + 1], &v[..k])?.output;
            losses::denoiser_objective(g, a, b, v[k + 1])
        }),
    }
}

/// Smoothness term through both occurrences of the transformed image.
fn smooth_case(rng: &mut ChaCha8Rng) -> Instance {
    let (tx, _) = pair_images(rng);
    let f = tiny_denoiser(TINY, rng.gen());
    Instance {
        inputs: vec![tx],
        f: Box::new(move |g, v| {
            let fp = f.register(g, ParamMode::Frozen);
            let ftx = f.forward_with(g, v[0], &fp)?.output;
            losses::smooth_regularizer(g, ftx, v[0])
        }),
    }
}

fn pretrain_recon_case(rng: &mut ChaCha8Rng) -> Instance {
    let (tx, x) = pair_images(rng);
    Instance {
        inputs: vec![tx, x],
        f: Box::new(|g, v| losses::pretrain_recon_loss(g, v[0], v[1])),
    }
}

fn pretrain_disc_case(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=5);
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    Instance {
        inputs: vec![uniform(rng, &[n, 1], 0.05, 0.95)],
        f: Box::new(move |g, v| losses::pretrain_disc_loss(g, v[0], &labels)),
    }
}

fn local_enhance_case(rng: &mut ChaCha8Rng) -> Instance {
    let (e, tx) = pair_images(rng);
    let n = e.shape()[0];
    let x = uniform(rng, &[n, 3, TINY, TINY], 0.05, 0.95);
    let m1 = Tensor::from_fn(&[n, 1, TINY, TINY], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
    let mask = losses::broadcast_mask(&m1, 3).unwrap();
    let phi = tiny_tapped_net(TINY, rng.gen(), false);
    let beta = [0.1, 0.5, 1.0];
    Instance {
        inputs: vec![e, tx],
        f: Box::new(move |g, v| {
            let xv = g.constant(x.clone());
            let mv = g.constant(mask.clone());
            losses::local_enhance_loss(g, &phi, v[0], v[1], xv, mv, beta)
        }),
    }
}

/// Global enhancement loss through the blur and a one-conv enhancer.
fn global_enhance_case(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let x = uniform(rng, &[n, 3, 5, 5], 0.05, 0.95);
    let w = signed(rng, &[3, 3, 3, 3]);
    let sigma = rng.gen_range(0.5..2.0);
    Instance {
        inputs: vec![w, x],
        f: Box::new(move |g, v| {
            let b = g.gaussian_blur(v[1], sigma)?;
            let e = g.conv2d(b, v[0], None, 1, 1)?;
            losses::global_enhance_loss(g, e, v[1])
        }),
    }
}

fn adaptive_layer_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = image(rng);
    Instance {
        inputs: vec![signed(rng, &shape), signed(rng, &shape)],
        f: Box::new(|g, v| losses::adaptive_layer_loss(g, v[0], v[1])),
    }
}

/// Adaptive identity loss with respect to the images and the
/// discriminator parameters.
fn adaptive_identity_case(rng: &mut ChaCha8Rng) -> Instance {
    let (xh, x) = pair_images(rng);
    let d = tiny_tapped_net(TINY, rng.gen(), true);
    let k = d.params().len();
    let mut inputs = d.params().to_vec();
    inputs.push(xh);
    inputs.push(x);
    Instance {
        inputs,
        f: Box::new(move |g, v| losses::adaptive_identity_loss(g, &d, &v[..k], v[k], v[k + 1], [0.5, 0.5])),
    }
}

/// Full identity-aware objective: transform total with respect to a
/// one-conv transform's weight, plus the discriminator loss with respect to
/// the discriminator parameters.
fn diat_case(rng: &mut ChaCha8Rng) -> Instance {
    let (x, a) = pair_images(rng);
    let d = tiny_tapped_net(TINY, rng.gen(), true);
    let f = tiny_denoiser(TINY, rng.gen());
    let phi = tiny_tapped_net(TINY, rng.gen(), false);
    let tw = uniform(rng, &[3, 3, 1, 1], 0.1, 0.4);
    let which_d = rng.gen_bool(0.5);
    let cfg = LossConfig {
        lambda: rng.gen_range(0.05..1.0),
        gamma: rng.gen_range(0.05..1.0),
        ..LossConfig::default()
    };
    let k = d.params().len();
    let mut inputs = d.params().to_vec();
    // the discriminator loss sees a detached transform output
    if !which_d {
        inputs.push(tw.clone());
    }
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let xv = g.constant(x.clone());
            let av = g.constant(a.clone());
            let twv = if which_d { g.constant(tw.clone()) } else { v[k] };
            let pre = g.conv2d(xv, twv, None, 0, 1)?;
            let tx = g.sigmoid(pre)?;
            let nets = losses::DiatNets {
                d: &d,
                d_params: &v[..k],
                f: &f,
                phi: &phi,
            };
            let (ld, terms) = losses::diat_objective(g, &cfg, &nets, xv, tx, av)?;
            Ok(if which_d { ld } else { terms.total })
        }),
    }
}

fn diat_a_case(rng: &mut ChaCha8Rng) -> Instance {
    let (x, a) = pair_images(rng);
    let d = tiny_tapped_net(TINY, rng.gen(), true);
    let tw = uniform(rng, &[3, 3, 1, 1], 0.1, 0.4);
    let which_d = rng.gen_bool(0.5);
    let cfg = LossConfig {
        lambda: rng.gen_range(0.05..1.0),
        adaptive_in_discriminator: rng.gen_bool(0.5),
        ..LossConfig::default()
    };
    let k = d.params().len();
    let mut inputs = d.params().to_vec();
    // the discriminator loss sees a detached transform output
    if !which_d {
        inputs.push(tw.clone());
    }
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let xv = g.constant(x.clone());
            let av = g.constant(a.clone());
            let twv = if which_d { g.constant(tw.clone()) } else { v[k] };
            let pre = g.conv2d(xv, twv, None, 0, 1)?;
            let tx = g.sigmoid(pre)?;
            let (ld, terms) = losses::diat_a_objective(g, &cfg, &d, &v[..k], xv, tx, av)?;
            Ok(if which_d { ld } else { terms.total })
        }),
    }
}

/// Every training objective.
pub fn loss_cases() -> Vec<Case> {
    vec![
        Case { name: "perceptual_content_loss", build: perceptual_case },
        Case { name: "identity_loss", build: identity_case },
        Case { name: "adversarial_loss_d", build: adversarial_d_case },
        Case { name: "adversarial_loss_t", build: adversarial_t_case },
        Case { name: "reconstruction_objective", build: reconstruction_case },
        Case { name: "denoiser_objective", build: denoiser_case },
        Case { name: "smooth_regularizer", build: smooth_case },
        Case { name: "pretrain_recon_loss", build: pretrain_recon_case },
        Case { name: "pretrain_disc_loss", build: pretrain_disc_case },
        Case { name: "local_enhance_loss", build: local_enhance_case },
        Case { name: "global_enhance_loss", build: global_enhance_case },
        Case { name: "adaptive_layer_loss", build: adaptive_layer_case },
        Case { name: "adaptive_identity_loss", build: adaptive_identity_case },
        Case { name: "diat_objective", build: diat_case },
        Case { name: "diat_a_objective", build: diat_a_case },
    ]
}

/// Checks `instances` random draws of every case; coordinates per input are
/// capped at `max_coords`.
pub fn run_cases(cases: &[Case], instances: usize, seed: u64, eps: f64, max_coords: Option<usize>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let inst = (case.build)(&mut rng);
            let report = grad_check_many(&inst.f, &inst.inputs, eps, max_coords)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(CaseResult {
            name: case.name,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
