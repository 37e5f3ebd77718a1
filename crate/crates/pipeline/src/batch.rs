//! Batch sampling and chunked inference.

use diat_core::{Graph32, Network32, Tensor32};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

/// Images per forward pass when evaluating without gradients.
pub const INFER_CHUNK: usize = 32;

/// `n` draws with replacement from `pool`.
pub fn sample_from(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Draws batches with equal numbers of positives and negatives; an odd
/// batch gets the extra item from the positives.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(indices: &[usize], label: impl Fn(usize) -> bool) -> Result<Self> {
        let (positives, negatives): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| label(i));
        if positives.is_empty() || negatives.is_empty() {
            return config_err(format!(
                "degenerate labels: {} positives and {} negatives",
                positives.len(),
                negatives.len()
            ));
        }
        Ok(Self { positives, negatives })
    }

    /// Indices with their labels, positives first.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<bool>) {
        let n_pos = batch.div_ceil(2);
        let mut idx = sample_from(&self.positives, n_pos, rng);
        idx.extend(sample_from(&self.negatives, batch - n_pos, rng));
        let labels = (0..batch).map(|k| k < n_pos).collect();
        (idx, labels)
    }
}

/// `net` applied to `[N,...]` inputs in chunks.
pub fn infer(net: &Network32, x: &Tensor32) -> Result<Tensor32> {
    map_chunks(x, |chunk| Ok(net.infer(chunk)?))
}

/// The `tap` feature map of `net` on `x`, flattened per sample.
pub fn tap_values(net: &Network32, x: &Tensor32, tap: &str) -> Result<Tensor32> {
    map_chunks(x, |chunk| {
        let mut g = Graph32::new();
        let xv = g.constant(chunk.clone());
        let params = net.register(&mut g, diat_core::ParamMode::Frozen);
        let fwd = net.forward_until(&mut g, xv, &params, tap)?;
        Ok(g.value(fwd.tap(tap)?).clone())
    })
}

pub fn map_chunks(x: &Tensor32, mut f: impl FnMut(&Tensor32) -> Result<Tensor32>) -> Result<Tensor32> {
    let items = x.unstack()?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(INFER_CHUNK) {
        let y = f(&Tensor32::stack(chunk)?)?;
        out.extend(y.unstack()?);
    }
    Ok(Tensor32::stack(&out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn balanced_batches_count_exactly() {
        let idx: Vec<usize> = (0..100).collect();
        let s = BalancedSampler::new(&idx, |i| i % 10 == 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut pos, mut neg) = (0, 0);
        for batch in [16, 15, 2] {
            for _ in 0..50 {
                let (b, labels) = s.sample(batch, &mut rng);
                assert_eq!(b.len(), batch);
                for (&i, &l) in b.iter().zip(&labels) {
                    assert_eq!(l, i % 10 == 0);
                    if l {
                        pos += 1
                    } else {
                        neg += 1
                    }
                }
                assert_eq!(labels.iter().filter(|&&l| l).count(), batch.div_ceil(2));
            }
        }
        assert_eq!((pos, neg), (50 * (8 + 8 + 1), 50 * (8 + 7 + 1)));
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let idx: Vec<usize> = (0..10).collect();
        assert!(BalancedSampler::new(&idx, |_| true).is_err());
        assert!(BalancedSampler::new(&idx, |_| false).is_err());
    }
}
