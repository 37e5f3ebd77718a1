//! Inference through the transform network and an optional enhancer.

use diat_core::{Graph32, Network32, Tensor32};

use crate::batch::{self, map_chunks};
use crate::config::EnhanceMode;
use crate::error::{config_err, Result};

/// Stacks `[N,Ca,H,W]` and `[N,Cb,H,W]` along channels.
pub fn concat_channels(a: &Tensor32, b: &Tensor32) -> Result<Tensor32> {
    let mut g = Graph32::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat_channels(av, bv)?;
    Ok(g.value(c).clone())
}

pub fn blur(x: &Tensor32, sigma: f64) -> Result<Tensor32> {
    let mut g = Graph32::new();
    let xv = g.constant(x.clone());
    let y = g.gaussian_blur(xv, sigma)?;
    Ok(g.value(y).clone())
}

fn clamp01(t: Tensor32) -> Tensor32 {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// `none`: T(x); `local`: E(T(x), x); `global`: E(B(T(x))). Outputs are
/// clamped to `[0,1]` and keep the input order.
pub fn run_transfer(
    t: &Network32,
    enhancer: Option<&Network32>,
    mode: EnhanceMode,
    sigma: f64,
    x: &Tensor32,
) -> Result<Tensor32> {
    let out = map_chunks(x, |chunk| {
        let tx = t.infer(chunk)?;
        match (mode, enhancer) {
            (EnhanceMode::None, _) => Ok(tx),
            (EnhanceMode::Local, Some(e)) => Ok(e.infer(&concat_channels(&tx, chunk)?)?),
            (EnhanceMode::Global, Some(e)) => Ok(e.infer(&blur(&tx, sigma)?)?),
            (EnhanceMode::Auto, _) => config_err("enhancement mode must be resolved before transfer"),
            (m, None) => config_err(format!("{m} enhancement needs an enhancer network")),
        }
    })?;
    Ok(clamp01(out))
}

/// Raw transform output, clamped.
pub fn transform_only(t: &Network32, x: &Tensor32) -> Result<Tensor32> {
    Ok(clamp01(batch::infer(t, x)?))
}
