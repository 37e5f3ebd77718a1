//! Supervised phases that precede adversarial training: reconstruction
//! pretraining of T, attribute pretraining of D, the identity embedders,
//! the evaluation classifier and the perceptual regularizer pair (g, f).

use diat_core::losses;
use diat_core::{Adam32, AdamConfig, Graph32, Network32, ParamMode, Tensor32, Var};
use diat_data::{Attribute, Dataset, Target};
use rand_chacha::ChaCha8Rng;

use crate::batch::{self, sample_from, BalancedSampler};
use crate::error::{Error, Result};

type Data = Dataset<f32>;

/// Hyperparameters shared by every supervised phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
}

/// Per-step training losses and a held-out figure of merit.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub losses: Vec<f64>,
    /// Held-out metric before training.
    pub initial: f64,
    /// Held-out metric after training.
    pub heldout: f64,
}

fn finite(v: f64, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { what: what.into(), iteration: step, last_checkpoint: None })
    }
}

/// Backpropagates `loss` and applies one ADAM step to `net`.
fn update(net: &mut Network32, adam: &mut Adam32, g: &mut Graph32, params: &[Var], loss: Var) -> Result<f64> {
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grads = net.grads(g, params);
    adam.step(net.params_mut(), &grads)?;
    Ok(value)
}

fn run_steps(
    net: &mut Network32,
    sched: Schedule,
    what: &str,
    mut loss: impl FnMut(&mut Graph32, &Network32, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut adam = Adam32::new(AdamConfig::with_lr(sched.lr), net.params());
    let mut out = Vec::with_capacity(sched.steps as usize);
    for step in 0..sched.steps {
        let mut g = Graph32::new();
        let params = net.register(&mut g, ParamMode::Trainable);
        let l = loss(&mut g, net, &params)?;
        let v = update(net, &mut adam, &mut g, &params, l)?;
        out.push(finite(v, what, step)?);
    }
    Ok(out)
}

/// Mean squared error per value between `net(x)` and `x`.
pub fn reconstruction_mse(net: &Network32, data: &Data, indices: &[usize]) -> Result<f64> {
    let x = data.images(indices)?;
    let y = batch::infer(net, &x)?;
    let sse: f64 = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(sse / x.numel() as f64)
}

/// Trains `t` to reproduce its input (summed squared error per batch).
/// Reports held-out per-value MSE.
pub fn pretrain_transform(
    t: &mut Network32,
    data: &Data,
    train: &[usize],
    heldout: &[usize],
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport> {
    let initial = reconstruction_mse(t, data, heldout)?;
    let losses = run_steps(t, sched, "reconstruction loss", |g, net, p| {
        let x = g.constant(data.images(&sample_from(train, sched.batch, rng))?);
        let tx = net.forward_with(g, x, p)?.output;
        Ok(losses::pretrain_recon_loss(g, tx, x)?)
    })?;
    Ok(PhaseReport { losses, initial, heldout: reconstruction_mse(t, data, heldout)? })
}

/// Fraction of `indices` where `net(x) >= 0.5` agrees with `label`.
pub fn binary_accuracy(net: &Network32, data: &Data, indices: &[usize], label: impl Fn(usize) -> bool) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let p = batch::infer(net, &data.images(indices)?)?;
    let hits = indices.iter().zip(p.data()).filter(|&(&i, &p)| (p >= 0.5) == label(i)).count();
    Ok(hits as f64 / indices.len() as f64)
}

fn train_binary(
    net: &mut Network32,
    data: &Data,
    train: &[usize],
    heldout: &[usize],
    label: impl Fn(usize) -> bool + Copy,
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport> {
    let sampler = BalancedSampler::new(train, label)?;
    let initial = binary_accuracy(net, data, heldout, label)?;
    let losses = run_steps(net, sched, "classification loss", |g, net, p| {
        let (idx, labels) = sampler.sample(sched.batch, rng);
        let x = g.constant(data.images(&idx)?);
        let probs = net.forward_with(g, x, p)?.output;
        Ok(losses::pretrain_disc_loss(g, probs, &labels)?)
    })?;
    Ok(PhaseReport { losses, initial, heldout: binary_accuracy(net, data, heldout, label)? })
}

/// Trains `d` to score images already in the `target` state as 1 and the
/// rest as 0 on balanced batches. Reports held-out accuracy.
pub fn pretrain_discriminator(
    d: &mut Network32,
    data: &Data,
    target: Target,
    train: &[usize],
    heldout: &[usize],
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport> {
    let label = |i: usize| target.satisfied_by(&data.samples[i].attributes);
    train_binary(d, data, train, heldout, label, sched, rng)
}

/// Trains the evaluation classifier to predict `attribute` itself.
pub fn train_attribute_classifier(
    c: &mut Network32,
    data: &Data,
    attribute: Attribute,
    train: &[usize],
    heldout: &[usize],
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport> {
    let label = |i: usize| data.samples[i].attributes.get(attribute);
    train_binary(c, data, train, heldout, label, sched, rng)
}

/// Top-1 identity accuracy of the embedder's classification head.
pub fn identity_accuracy(phi: &Network32, data: &Data, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let logits = batch::infer(phi, &data.images(indices)?)?;
    let k = logits.shape()[1];
    let hits = indices
        .iter()
        .enumerate()
        .filter(|&(n, &i)| {
            let row = &logits.data()[n * k..(n + 1) * k];
            let arg = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            arg == data.samples[i].identity
        })
        .count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Trains an identity embedder by classification over identities.
pub fn train_embedder(
    phi: &mut Network32,
    data: &Data,
    train: &[usize],
    heldout: &[usize],
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport> {
    let initial = identity_accuracy(phi, data, heldout)?;
    let losses = run_steps(phi, sched, "identity classification loss", |g, net, p| {
        let idx = sample_from(train, sched.batch, rng);
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].identity).collect();
        let x = g.constant(data.images(&idx)?);
        let logits = net.forward_with(g, x, p)?.output;
        Ok(g.softmax_cross_entropy(logits, &labels)?)
    })?;
    Ok(PhaseReport { losses, initial, heldout: identity_accuracy(phi, data, heldout)? })
}

/// The reconstruction network `g` and denoiser `f` behind the smoothness
/// term. `g` is trained first on the identity loss and then frozen; `f`
/// is trained to remove `g`'s artifacts while leaving clean images alone.
pub struct Regularizer {
    pub g: Network32,
    pub f: Network32,
    g_frozen: bool,
}

impl Regularizer {
    pub fn new(g: Network32, f: Network32) -> Self {
        Self { g, f, g_frozen: false }
    }

    /// Both networks already trained, e.g. loaded from checkpoints.
    pub fn trained(g: Network32, f: Network32) -> Self {
        Self { g, f, g_frozen: true }
    }

    pub fn is_frozen(&self) -> bool {
        self.g_frozen
    }

    pub fn train_reconstruction(
        &mut self,
        phi: &Network32,
        weights: [f64; 2],
        data: &Data,
        train: &[usize],
        sched: Schedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if self.g_frozen {
            return Err(Error::PhaseOrder("the reconstruction network is already frozen".into()));
        }
        run_steps(&mut self.g, sched, "reconstruction-network loss", |g, net, p| {
            let x = g.constant(data.images(&sample_from(train, sched.batch, rng))?);
            let gx = net.forward_with(g, x, p)?.output;
            Ok(losses::reconstruction_objective(g, phi, gx, x, weights)?)
        })
    }

    pub fn freeze(&mut self) {
        self.g_frozen = true;
    }

    pub fn train_denoiser(&mut self, data: &Data, train: &[usize], sched: Schedule, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if !self.g_frozen {
            return Err(Error::PhaseOrder("freeze the reconstruction network before training the denoiser".into()));
        }
        let gnet = &self.g;
        run_steps(&mut self.f, sched, "denoiser loss", |g, net, p| {
            let x = data.images(&sample_from(train, sched.batch, rng))?;
            let gx = g.constant(batch::infer(gnet, &x)?);
            let x = g.constant(x);
            let fgx = net.forward_with(g, gx, p)?.output;
            let fx = net.forward_with(g, x, p)?.output;
            Ok(losses::denoiser_objective(g, fgx, fx, x)?)
        })
    }
}

/// Mean of `||f(x) - x||^2` per value over `x`.
pub fn denoiser_residual(f: &Network32, x: &Tensor32) -> Result<f64> {
    let y = batch::infer(f, x)?;
    let sse: f64 = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(sse / x.numel() as f64)
}
