//! Training objectives, each built as a scalar node on a [`Graph`].
//!
//! Images and feature maps are batched `[N, C, H, W]` (rank-3 values count
//! as a batch of one). Per-sample losses are averaged over the batch except
//! the two pretraining losses, which sum.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Network, ParamMode};
use crate::scalar::Scalar;
use crate::tensor::{image_dims, Tensor};

pub const LOG_EPS: f64 = 1e-7;

/// Generator side of the attribute loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GeneratorLoss {
    /// Minimize `mean log(1 - D(T(x)))`.
    Saturating,
    /// Minimize `-mean log D(T(x))`.
    #[default]
    NonSaturating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the identity term.
    pub lambda: f64,
    /// Weight of the smoothness term.
    pub gamma: f64,
    /// Weights of the `conv4` and `conv5` identity taps.
    pub identity_weights: [f64; 2],
    /// Weights of the `conv1`..`conv3` taps in the local enhancement loss.
    pub beta: [f64; 3],
    /// Blur standard deviation for global enhancement.
    pub sigma: f64,
    pub generator_loss: GeneratorLoss,
    /// Let the adaptive identity term also train the discriminator.
    pub adaptive_in_discriminator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.001,
            identity_weights: [0.5, 0.5],
            beta: [0.1, 0.5, 1.0],
            sigma: 1.8,
            generator_loss: GeneratorLoss::NonSaturating,
            adaptive_in_discriminator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda, self.gamma]
            .into_iter()
            .chain(self.identity_weights)
            .chain(self.beta);
        for w in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return invalid("loss_config", format!("weights must be finite and >= 0, got {w}"));
            }
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return invalid("loss_config", format!("sigma must be > 0, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Tap names feeding the identity losses, in weight order.
pub const IDENTITY_TAPS: [&str; 2] = ["conv4", "conv5"];
/// Tap names feeding the local enhancement feature term, in weight order.
pub const ENHANCE_TAPS: [&str; 3] = ["conv1", "conv2", "conv3"];

fn batch_of(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[0]
    } else {
        1
    }
}

/// `||a - b||_F^2 / (2 C H W)`, averaged over the batch.
pub fn perceptual_content_loss<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return shape_err("perceptual_content_loss", format!("{:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    let (n, c, h, w) = image_dims(g.shape(a))?;
    let d = g.sub(a, b)?;
    let sq = g.frobenius_sq(d)?;
    g.mul_scalar(sq, 1.0 / (2.0 * (c * h * w * n) as f64))
}

/// `sum_l w_l * perceptual_content_loss(a_l, b_l)`.
pub fn weighted_layer_loss<S: Scalar>(g: &mut Graph<S>, a: &[Var], b: &[Var], weights: &[f64]) -> Result<Var> {
    if a.len() != b.len() || a.len() != weights.len() || a.is_empty() {
        return invalid("weighted_layer_loss", "tap lists and weights must align");
    }
    let mut total = None;
    for ((&x, &y), &w) in a.iter().zip(b).zip(weights) {
        let l = perceptual_content_loss(g, x, y)?;
        let l = g.mul_scalar(l, w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap())
}

/// Runs `net` up to the last of `taps` and returns those tap nodes in order.
pub fn tap_features<S: Scalar>(
    g: &mut Graph<S>,
    net: &Network<S>,
    params: &[Var],
    x: Var,
    taps: &[&str],
) -> Result<Vec<Var>> {
    if taps.is_empty() {
        return Err(crate::Error::Spec("no taps requested".into()));
    }
    let names = net.spec().tap_names();
    let deepest = taps
        .iter()
        .map(|t| names.iter().position(|n| n == t))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| crate::Error::Spec(format!("{} lacks one of {taps:?}", net.id)))?
        .into_iter()
        .max()
        .unwrap();
    let fwd = net.forward_until(g, x, params, names[deepest])?;
    taps.iter().map(|t| fwd.tap(t)).collect()
}

/// Weighted perceptual distance between `x_hat` and `x` on `phi`'s
/// `conv4`/`conv5` taps; `phi` is frozen.
pub fn identity_loss<S: Scalar>(g: &mut Graph<S>, phi: &Network<S>, x_hat: Var, x: Var, weights: [f64; 2]) -> Result<Var> {
    let params = phi.register(g, ParamMode::Frozen);
    let a = tap_features(g, phi, &params, x_hat, &IDENTITY_TAPS)?;
    let b = tap_features(g, phi, &params, x, &IDENTITY_TAPS)?;
    weighted_layer_loss(g, &a, &b, &weights)
}

/// Same form as [`perceptual_content_loss`] on discriminator taps.
pub fn adaptive_layer_loss<S: Scalar>(g: &mut Graph<S>, d_hat: Var, d_x: Var) -> Result<Var> {
    perceptual_content_loss(g, d_hat, d_x)
}

/// Weighted perceptual distance on the discriminator's `conv4`/`conv5`
/// taps, evaluated with the parameter handles `d_params`.
pub fn adaptive_identity_loss<S: Scalar>(
    g: &mut Graph<S>,
    d: &Network<S>,
    d_params: &[Var],
    x_hat: Var,
    x: Var,
    weights: [f64; 2],
) -> Result<Var> {
    let a = tap_features(g, d, d_params, x_hat, &IDENTITY_TAPS)?;
    let b = tap_features(g, d, d_params, x, &IDENTITY_TAPS)?;
    weighted_layer_loss(g, &a, &b, &weights)
}

fn mean_log<S: Scalar>(g: &mut Graph<S>, p: Var, complement: bool) -> Result<Var> {
    let p = if complement { g.affine(p, -1.0, 1.0)? } else { p };
    let l = g.log_clamped(p, LOG_EPS)?;
    g.mean(l)
}

/// `-mean log D(a) - mean log(1 - D(T(x)))` from discriminator probabilities.
pub fn discriminator_adversarial_loss<S: Scalar>(g: &mut Graph<S>, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = mean_log(g, d_real, false)?;
    let f = mean_log(g, d_fake, true)?;
    let s = g.add(r, f)?;
    g.mul_scalar(s, -1.0)
}

pub fn generator_adversarial_loss<S: Scalar>(g: &mut Graph<S>, d_fake: Var, form: GeneratorLoss) -> Result<Var> {
    match form {
        GeneratorLoss::Saturating => mean_log(g, d_fake, true),
        GeneratorLoss::NonSaturating => {
            let l = mean_log(g, d_fake, false)?;
            g.mul_scalar(l, -1.0)
        }
    }
}

/// `(loss_D, loss_T)` from probabilities on the real and fake batches.
/// Callers training the discriminator feed it a detached fake image.
pub fn adversarial_losses<S: Scalar>(
    g: &mut Graph<S>,
    d_real: Var,
    d_fake: Var,
    form: GeneratorLoss,
) -> Result<(Var, Var)> {
    if g.value(d_real).numel() == 0 || g.value(d_fake).numel() == 0 {
        return invalid("adversarial_losses", "empty batch");
    }
    let ld = discriminator_adversarial_loss(g, d_real, d_fake)?;
    let lt = generator_adversarial_loss(g, d_fake, form)?;
    Ok((ld, lt))
}

/// Squared Frobenius norm of `a - b`, averaged over the batch.
pub fn batch_sq_error<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let n = batch_of(g.shape(a));
    let d = g.sub(a, b)?;
    let s = g.frobenius_sq(d)?;
    g.mul_scalar(s, 1.0 / n as f64)
}

/// Reconstruction-network objective: identity loss between `g(x)` and `x`.
pub fn reconstruction_objective<S: Scalar>(
    g: &mut Graph<S>,
    phi: &Network<S>,
    g_of_x: Var,
    x: Var,
    weights: [f64; 2],
) -> Result<Var> {
    identity_loss(g, phi, g_of_x, x, weights)
}

/// `||f(g(x)) - x||^2 + ||f(x) - x||^2`.
pub fn denoiser_objective<S: Scalar>(g: &mut Graph<S>, f_of_gx: Var, f_of_x: Var, x: Var) -> Result<Var> {
    let a = batch_sq_error(g, f_of_gx, x)?;
    let b = batch_sq_error(g, f_of_x, x)?;
    g.add(a, b)
}

/// `||f(T(x)) - T(x)||^2`; differentiable through both occurrences.
pub fn smooth_regularizer<S: Scalar>(g: &mut Graph<S>, f_of_tx: Var, tx: Var) -> Result<Var> {
    batch_sq_error(g, f_of_tx, tx)
}

/// `sum_i ||x_i - T(x_i)||^2` over the batch.
pub fn pretrain_recon_loss<S: Scalar>(g: &mut Graph<S>, tx: Var, x: Var) -> Result<Var> {
    let d = g.sub(x, tx)?;
    g.frobenius_sq(d)
}

/// `sum_i (y_i - D(x_i))^2` over the batch.
pub fn pretrain_disc_loss<S: Scalar>(g: &mut Graph<S>, probs: Var, labels: &[bool]) -> Result<Var> {
    if g.value(probs).numel() != labels.len() {
        return shape_err(
            "pretrain_disc_loss",
            format!("{} predictions for {} labels", g.value(probs).numel(), labels.len()),
        );
    }
    let y = Tensor::new(
        g.shape(probs),
        labels.iter().map(|&l| if l { S::one() } else { S::zero() }).collect(),
    )?;
    let y = g.constant(y);
    let d = g.sub(y, probs)?;
    g.frobenius_sq(d)
}

/// Expands a `[N, 1, H, W]` (or `[1, H, W]`) mask over `channels`.
pub fn broadcast_mask<S: Scalar>(mask: &Tensor<S>, channels: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = mask.image_dims()?;
    if c != 1 {
        return shape_err("broadcast_mask", format!("mask must have one channel, got {c}"));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * channels * plane);
    for p in mask.data().chunks(plane) {
        for _ in 0..channels {
            data.extend_from_slice(p);
        }
    }
    let shape = if mask.rank() == 4 { vec![n, channels, h, w] } else { vec![channels, h, w] };
    Tensor::new(&shape, data)
}

/// Pixel term outside the mask plus a weighted feature term on the masked
/// region, with `phi` frozen. `mask` must match the image shape exactly
/// (see [`broadcast_mask`]).
#[allow(clippy::too_many_arguments)]
pub fn local_enhance_loss<S: Scalar>(
    g: &mut Graph<S>,
    phi: &Network<S>,
    enhanced: Var,
    tx: Var,
    x: Var,
    mask: Var,
    beta: [f64; 3],
) -> Result<Var> {
    if g.shape(mask) != g.shape(x) {
        return shape_err(
            "local_enhance_loss",
            format!("mask {:?} vs image {:?}", g.shape(mask), g.shape(x)),
        );
    }
    let outside = g.affine(mask, -1.0, 1.0)?;
    let diff = g.sub(enhanced, x)?;
    let masked = g.mul(outside, diff)?;
    let n = batch_of(g.shape(x));
    let pix = g.frobenius_sq(masked)?;
    let pix = g.mul_scalar(pix, 1.0 / n as f64)?;

    let params = phi.register(g, ParamMode::Frozen);
    let mt = g.mul(mask, tx)?;
    let me = g.mul(mask, enhanced)?;
    let a = tap_features(g, phi, &params, mt, &ENHANCE_TAPS)?;
    let b = tap_features(g, phi, &params, me, &ENHANCE_TAPS)?;
    let feat = weighted_layer_loss(g, &a, &b, &beta)?;
    g.add(pix, feat)
}

/// `||E(B(x)) - x||^2` given the enhancer output on the blurred image.
pub fn global_enhance_loss<S: Scalar>(g: &mut Graph<S>, enhanced_blurred: Var, x: Var) -> Result<Var> {
    batch_sq_error(g, enhanced_blurred, x)
}

/// Components of a transform-network objective.
#[derive(Clone, Copy, Debug)]
pub struct TransformTerms {
    pub adversarial: Var,
    pub identity: Option<Var>,
    pub smooth: Option<Var>,
    pub total: Var,
}

/// `adversarial + lambda * identity + gamma * smooth`; absent terms are
/// skipped entirely.
pub fn combine_transform_terms<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &LossConfig,
    adversarial: Var,
    identity: Option<Var>,
    smooth: Option<Var>,
) -> Result<TransformTerms> {
    let mut total = adversarial;
    if let Some(id) = identity {
        let w = g.mul_scalar(id, cfg.lambda)?;
        total = g.add(total, w)?;
    }
    if let Some(sm) = smooth {
        let w = g.mul_scalar(sm, cfg.gamma)?;
        total = g.add(total, w)?;
    }
    Ok(TransformTerms {
        adversarial,
        identity,
        smooth,
        total,
    })
}

/// Frozen networks used by the identity-aware objective.
pub struct DiatNets<'a, S> {
    pub d: &'a Network<S>,
    pub d_params: &'a [Var],
    pub f: &'a Network<S>,
    pub phi: &'a Network<S>,
}

/// Discriminator loss on `(a, detached tx)` and generator term on `tx`.
fn adversarial_pair<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &LossConfig,
    d: &Network<S>,
    d_params: &[Var],
    tx: Var,
    a: Var,
) -> Result<(Var, Var)> {
    let real = d.forward_with(g, a, d_params)?.output;
    let txd = g.detach(tx);
    let fake_d = d.forward_with(g, txd, d_params)?.output;
    let fake_t = d.forward_with(g, tx, d_params)?.output;
    let loss_d = discriminator_adversarial_loss(g, real, fake_d)?;
    let adv = generator_adversarial_loss(g, fake_t, cfg.generator_loss)?;
    Ok((loss_d, adv))
}

/// Discriminator loss and transform objective with identity loss on `phi`
/// and the smoothness term through `f`. Terms whose weight is zero are not
/// built.
pub fn diat_objective<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &LossConfig,
    nets: &DiatNets<S>,
    x: Var,
    tx: Var,
    a: Var,
) -> Result<(Var, TransformTerms)> {
    let (loss_d, adv) = adversarial_pair(g, cfg, nets.d, nets.d_params, tx, a)?;
    let identity = match cfg.lambda > 0.0 {
        true => Some(identity_loss(g, nets.phi, tx, x, cfg.identity_weights)?),
        false => None,
    };
    let smooth = match cfg.gamma > 0.0 {
        true => {
            let fp = nets.f.register(g, ParamMode::Frozen);
            let ftx = nets.f.forward_with(g, tx, &fp)?.output;
            Some(smooth_regularizer(g, ftx, tx)?)
        }
        false => None,
    };
    let terms = combine_transform_terms(g, cfg, adv, identity, smooth)?;
    Ok((loss_d, terms))
}

/// Discriminator loss and transform objective with the identity loss taken
/// on the discriminator's own taps and no smoothness term.
pub fn diat_a_objective<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &LossConfig,
    d: &Network<S>,
    d_params: &[Var],
    x: Var,
    tx: Var,
    a: Var,
) -> Result<(Var, TransformTerms)> {
    let (mut loss_d, adv) = adversarial_pair(g, cfg, d, d_params, tx, a)?;
    let identity = match cfg.lambda > 0.0 {
        true => Some(adaptive_identity_loss(g, d, d_params, tx, x, cfg.identity_weights)?),
        false => None,
    };
    if cfg.adaptive_in_discriminator && cfg.lambda > 0.0 {
        let txd = g.detach(tx);
        let id_d = adaptive_identity_loss(g, d, d_params, txd, x, cfg.identity_weights)?;
        let w = g.mul_scalar(id_d, cfg.lambda)?;
        loss_d = g.add(loss_d, w)?;
    }
    let terms = combine_transform_terms(g, cfg, adv, identity, None)?;
    Ok((loss_d, terms))
}
