//! Second-stage enhancement networks.

use diat_core::losses;
use diat_core::{Adam32, AdamConfig, Graph32, Network32, ParamMode};
use diat_data::{Attribute, Dataset};
use rand_chacha::ChaCha8Rng;

use crate::batch::{self, sample_from};
use crate::error::{config_err, Error, Result};
use crate::phases::Schedule;
use crate::transfer::{blur, concat_channels};

type Data = Dataset<f32>;

fn check(v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { what: "enhancer loss".into(), iteration: step, last_checkpoint: None })
    }
}

/// Trains `e` on `(T(x), x)` with the attribute mask, `t` frozen. The loss
/// keeps `e`'s output equal to `x` outside the mask and perceptually close
/// to `T(x)` inside it. Returns per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn train_local_enhancer(
    e: &mut Network32,
    t: &Network32,
    phi: &Network32,
    beta: [f64; 3],
    attribute: Attribute,
    data: &Data,
    train: &[usize],
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !attribute.is_local() {
        return config_err(format!("{attribute} is global; the local enhancer needs a mask"));
    }
    let mut adam = Adam32::new(AdamConfig::with_lr(sched.lr), e.params());
    let mut out = Vec::with_capacity(sched.steps as usize);
    for step in 0..sched.steps {
        let idx = sample_from(train, sched.batch, rng);
        let x = data.images(&idx)?;
        let tx = batch::infer(t, &x)?;
        let input = concat_channels(&tx, &x)?;
        let mask = losses::broadcast_mask(&data.masks(&idx, attribute)?, 3)?;
        let mut g = Graph32::new();
        let (xv, txv, inv, mv) = (g.constant(x), g.constant(tx), g.constant(input), g.constant(mask));
        let p = e.register(&mut g, ParamMode::Trainable);
        let enhanced = e.forward_with(&mut g, inv, &p)?.output;
        let loss = losses::local_enhance_loss(&mut g, phi, enhanced, txv, xv, mv, beta)?;
        out.push(check(g.value(loss).item() as f64, step)?);
        g.backward(loss)?;
        let grads = e.grads(&g, &p);
        adam.step(e.params_mut(), &grads)?;
    }
    Ok(out)
}

/// Trains `e` to invert a gaussian blur of std `sigma` on clean images.
pub fn train_global_enhancer(
    e: &mut Network32,
    sigma: f64,
    data: &Data,
    train: &[usize],
    sched: Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return config_err(format!("blur sigma must be positive, got {sigma}"));
    }
    let mut adam = Adam32::new(AdamConfig::with_lr(sched.lr), e.params());
    let mut out = Vec::with_capacity(sched.steps as usize);
    for step in 0..sched.steps {
        let x = data.images(&sample_from(train, sched.batch, rng))?;
        let bx = blur(&x, sigma)?;
        let mut g = Graph32::new();
        let (xv, bv) = (g.constant(x), g.constant(bx));
        let p = e.register(&mut g, ParamMode::Trainable);
        let y = e.forward_with(&mut g, bv, &p)?.output;
        let loss = losses::global_enhance_loss(&mut g, y, xv)?;
        out.push(check(g.value(loss).item() as f64, step)?);
        g.backward(loss)?;
        let grads = e.grads(&g, &p);
        adam.step(e.params_mut(), &grads)?;
    }
    Ok(out)
}
