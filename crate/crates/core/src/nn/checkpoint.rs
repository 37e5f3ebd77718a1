//! Binary checkpoint format.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic      8 bytes  "DIATCKPT"
//! version    u32      1
//! dtype      u8       element byte width (4 or 8)
//! id         str      network identifier
//! spec_hash  32 bytes SHA-256 of the network spec's canonical form
//! step       u64
//! rng        u8 flag, then seed[32] stream:u64 word_pos:u128
//! meta       u32 count, then (str key, str value) pairs
//! params     u32 count, then (str name, tensor) pairs
//! optimizer  u8 flag, then lr beta1 beta2 eps:f64 policy:u8
//!            clip:u8 flag + f64, t:u64, count:u32, m tensors, v tensors
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8; `tensor` is a u8 rank,
//! u64 extents, then the elements.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::network::Network;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, NonFinitePolicy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIATCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub network_id: String,
    pub spec_hash: [u8; 32],
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form training counters.
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor<S>)>,
    pub optimizer: Option<Adam<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn of(net: &Network<S>, step: u64) -> Self {
        Self {
            network_id: net.id.clone(),
            spec_hash: net.spec().hash(),
            step,
            rng: None,
            meta: BTreeMap::new(),
            params: net
                .param_names()
                .iter()
                .cloned()
                .zip(net.params().iter().cloned())
                .collect(),
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, adam: &Adam<S>) -> Self {
        self.optimizer = Some(adam.clone());
        self
    }

    pub fn with_rng(mut self, rng: &ChaCha8Rng) -> Self {
        self.rng = Some(RngState::capture(rng));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    /// Copies the parameters into `net`, whose spec must hash identically.
    pub fn restore_into(&self, net: &mut Network<S>) -> Result<()> {
        if net.spec().hash() != self.spec_hash {
            return Err(Error::Checkpoint(format!(
                "spec hash mismatch: checkpoint {:?} does not match network {:?}",
                self.network_id, net.id
            )));
        }
        if net.param_names().len() != self.params.len()
            || net.param_names().iter().zip(&self.params).any(|(a, (b, _))| a != b)
        {
            return Err(Error::Checkpoint("parameter names differ from the network".into()));
        }
        net.set_params(self.params.iter().map(|(_, t)| t.clone()).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(S::DTYPE_TAG);
        put_str(&mut out, &self.network_id);
        out.extend_from_slice(&self.spec_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            Some(adam) => {
                out.push(1);
                let c = adam.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(match c.non_finite {
                    NonFinitePolicy::Skip => 0,
                    NonFinitePolicy::Abort => 1,
                });
                match c.clip_norm {
                    Some(v) => {
                        out.push(1);
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    None => {
                        out.push(0);
                        out.extend_from_slice(&0f64.to_le_bytes());
                    }
                }
                out.extend_from_slice(&adam.step_count().to_le_bytes());
                out.extend_from_slice(&(adam.first_moments().len() as u32).to_le_bytes());
                for t in adam.first_moments().iter().chain(adam.second_moments()) {
                    put_tensor(&mut out, t);
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let tag = r.u8()?;
        if tag != S::DTYPE_TAG {
            return Err(Error::Checkpoint(format!(
                "element width {tag} does not match requested width {}",
                S::DTYPE_TAG
            )));
        }
        let network_id = r.string()?;
        let spec_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let rng = match r.flag()? {
            true => Some(RngState {
                seed: r.take(32)?.try_into().unwrap(),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
            }),
            false => None,
        };
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.flag()? {
            true => {
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let non_finite = match r.u8()? {
                    0 => NonFinitePolicy::Skip,
                    1 => NonFinitePolicy::Abort,
                    x => return Err(Error::Checkpoint(format!("unknown non-finite policy {x}"))),
                };
                let has_clip = r.flag()?;
                let clip = r.f64()?;
                let config = AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    non_finite,
                    clip_norm: has_clip.then_some(clip),
                };
                let t = r.u64()?;
                let k = r.u32()? as usize;
                let m = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(Adam::from_parts(config, t, m, v).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
            false => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            network_id,
            spec_hash,
            step,
            rng,
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(Error::Checkpoint(format!("invalid flag byte {x}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn tensor<S: Scalar>(&mut self) -> Result<Tensor<S>> {
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let width = S::DTYPE_TAG as usize;
        let bytes = numel
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let raw = self.take(bytes)?;
        let data = raw.chunks_exact(width).map(S::read_le).collect();
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;
    use crate::nn::arch::build_denoising_net;
    use crate::optim::Gradients;

    fn sample() -> (Network<f32>, Checkpoint<f32>) {
        let mut net = build_denoising_net::<f32>(8, 4, 3).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), net.params());
        let mut grads = Gradients::zeros_like(net.params());
        for t in &mut grads.tensors {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sin());
        }
        adam.step(net.params_mut(), &grads).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u32();
        let ck = Checkpoint::of(&net, 17)
            .with_optimizer(&adam)
            .with_rng(&rng)
            .with_meta("phase", "pretrain");
        (net, ck)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut copy = state.restore();
        assert_eq!(rng.next_u64(), copy.next_u64());
    }

    #[test]
    fn forward_is_bit_exact_after_restore() {
        let (net, ck) = sample();
        let mut fresh = build_denoising_net::<f32>(8, 4, 99).unwrap();
        Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap().restore_into(&mut fresh).unwrap();
        let x = Tensor::from_fn(&[1, 3, 8, 8], |i| (i as f32 * 0.37).cos()).unwrap();
        assert_eq!(net.infer(&x).unwrap(), fresh.infer(&x).unwrap());
    }

    #[test]
    fn spec_hash_mismatch_rejected() {
        let (_, ck) = sample();
        let mut other = build_denoising_net::<f32>(8, 8, 3).unwrap();
        assert!(matches!(ck.restore_into(&mut other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&long).is_err());
    }
}
