//! Evaluation metrics on frozen networks.

use diat_core::{Network32, Tensor32};
use diat_data::Target;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{self, tap_values};
use crate::error::{config_err, Result};

/// Tap of the identity embedder used as the identity descriptor.
pub const EMBEDDING_TAP: &str = "embedding";

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub n: usize,
    /// Fraction of outputs the evaluation classifier puts in the target state.
    pub attribute_success: f64,
    /// Mean embedding distance between each input and its own output.
    pub identity_distance: f64,
    /// Mean embedding distance between outputs and inputs of a different identity.
    pub random_pair_distance: f64,
    /// Mean absolute per-value change outside the attribute mask.
    pub outside_mask_change: Option<f64>,
}

/// Fraction of `outputs` classified as being in the `target` state.
pub fn attribute_success(classifier: &Network32, outputs: &Tensor32, target: Target) -> Result<f64> {
    let p = batch::infer(classifier, outputs)?;
    let hits = p.data().iter().filter(|&&p| (p >= 0.5) == target.present).count();
    Ok(hits as f64 / p.numel().max(1) as f64)
}

pub fn embeddings(phi: &Network32, x: &Tensor32) -> Result<Vec<Vec<f64>>> {
    let e = tap_values(phi, x, EMBEDDING_TAP)?;
    let n = e.shape()[0];
    let k = e.numel() / n.max(1);
    Ok(e.data().chunks(k).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance between `inputs[i]` and `outputs[i]`.
pub fn matched_distance(phi: &Network32, inputs: &Tensor32, outputs: &Tensor32) -> Result<f64> {
    let (a, b) = (embeddings(phi, inputs)?, embeddings(phi, outputs)?);
    Ok(a.iter().zip(&b).map(|(x, y)| l2(x, y)).sum::<f64>() / a.len().max(1) as f64)
}

/// Mean distance between `outputs[i]` and `inputs[j]` for a seeded random
/// `j` with a different identity.
pub fn random_pair_distance(
    phi: &Network32,
    inputs: &Tensor32,
    outputs: &Tensor32,
    identities: &[usize],
    seed: u64,
) -> Result<f64> {
    let (a, b) = (embeddings(phi, inputs)?, embeddings(phi, outputs)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0;
    for (i, out) in b.iter().enumerate() {
        let others: Vec<usize> = (0..a.len()).filter(|&j| identities[j] != identities[i]).collect();
        if let Some(&j) = others.choose(&mut rng) {
            total += l2(out, &a[j]);
            count += 1;
        }
    }
    if count == 0 {
        return config_err("random-pair baseline needs at least two identities");
    }
    Ok(total / count as f64)
}

/// Mean `|outputs - inputs|` over values where the `[N,1,H,W]` mask is 0.
pub fn outside_mask_change(inputs: &Tensor32, outputs: &Tensor32, masks: &Tensor32) -> Result<f64> {
    let (n, c, h, w) = inputs.image_dims()?;
    let plane = h * w;
    let (mut total, mut count) = (0.0, 0usize);
    for s in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                if masks.data()[s * plane + p] == 0.0 {
                    let k = (s * c + ch) * plane + p;
                    total += (outputs.data()[k] - inputs.data()[k]).abs() as f64;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean Frobenius norm of `f(y) - y` per sample.
pub fn residual_noise(f: &Network32, y: &Tensor32) -> Result<f64> {
    let fy = batch::infer(f, y)?;
    let n = y.shape()[0];
    let k = y.numel() / n;
    let total: f64 = (0..n)
        .map(|s| {
            let a = &y.data()[s * k..(s + 1) * k];
            let b = &fy.data()[s * k..(s + 1) * k];
            a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Peak signal-to-noise ratio in dB for signals in `[0,1]`.
pub fn psnr(a: &Tensor32, b: &Tensor32) -> Result<f64> {
    if a.shape() != b.shape() {
        return config_err(format!("psnr of {:?} and {:?}", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-20)).log10())
}

/// Evaluation networks, trained apart from everything in the training loop.
pub struct Evaluator<'a> {
    pub classifier: &'a Network32,
    pub embedder: &'a Network32,
}

impl Evaluator<'_> {
    /// Metrics of `outputs` produced from `inputs`.
    pub fn metrics(
        &self,
        inputs: &Tensor32,
        outputs: &Tensor32,
        identities: &[usize],
        masks: Option<&Tensor32>,
        target: Target,
        seed: u64,
    ) -> Result<Metrics> {
        Ok(Metrics {
            n: identities.len(),
            attribute_success: attribute_success(self.classifier, outputs, target)?,
            identity_distance: matched_distance(self.embedder, inputs, outputs)?,
            random_pair_distance: random_pair_distance(self.embedder, inputs, outputs, identities, seed)?,
            outside_mask_change: masks.map(|m| outside_mask_change(inputs, outputs, m)).transpose()?,
        })
    }
}
