//! Network construction for every role, and the checkpoint directory
//! layout shared by the phases.

use std::path::{Path, PathBuf};

use diat_core::nn::{self, Activation, LayerKind, LayerSpec, NetworkSpec};
use diat_core::{Checkpoint, Network32, Scale};

use crate::error::{Error, Result};

/// Every network the pipeline trains. The file name of a role's
/// checkpoint is `<role>.ckpt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Transform network after reconstruction pretraining.
    PretrainedTransform,
    /// Discriminator after supervised pretraining.
    PretrainedDiscriminator,
    Transform,
    Discriminator,
    Reconstruction,
    Denoiser,
    Embedder,
    EvalEmbedder,
    AttributeClassifier,
    LocalEnhancer,
    GlobalEnhancer,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainedTransform => "transform_pretrained",
            Self::PretrainedDiscriminator => "discriminator_pretrained",
            Self::Transform => "transform",
            Self::Discriminator => "discriminator",
            Self::Reconstruction => "reconstruction",
            Self::Denoiser => "denoiser",
            Self::Embedder => "embedder",
            Self::EvalEmbedder => "eval_embedder",
            Self::AttributeClassifier => "attribute_classifier",
            Self::LocalEnhancer => "local_enhancer",
            Self::GlobalEnhancer => "global_enhancer",
        }
    }

    /// The phase that produces this checkpoint, for error messages.
    pub fn phase(self) -> &'static str {
        match self {
            Self::PretrainedTransform | Self::PretrainedDiscriminator => "pretrain",
            Self::Reconstruction | Self::Denoiser | Self::Embedder => "pretrain",
            Self::EvalEmbedder | Self::AttributeClassifier => "pretrain",
            Self::Transform | Self::Discriminator => "train",
            Self::LocalEnhancer | Self::GlobalEnhancer => "enhance-train",
        }
    }

    pub fn path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.ckpt", self.name()))
    }
}

/// Sizes fixed by the run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shapes {
    pub scale: Scale,
    pub resolution: usize,
    pub n_identities: usize,
    pub denoiser_width: usize,
    pub enhancer_width: usize,
}

/// Small strided conv classifier with a sigmoid head, independent of the
/// discriminator architecture.
pub fn attribute_classifier_spec(resolution: usize) -> Result<NetworkSpec> {
    let conv = |channels| LayerSpec::new(LayerKind::Conv { channels, kernel: 3, pad: 1, stride: 2 });
    let relu = || LayerSpec::new(LayerKind::Activation(Activation::Relu));
    let spec = NetworkSpec {
        input: [3, resolution, resolution],
        layers: vec![
            conv(8),
            relu(),
            conv(16),
            relu(),
            conv(32),
            relu(),
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Dense { units: 1 }),
            LayerSpec::new(LayerKind::Activation(Activation::Sigmoid)),
        ],
        scale: Scale::ONE,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Rewrites a plain stack of 3x3 convs so its first three channels carry
/// input channels `offset..offset + 3` unchanged to the output. The other
/// hidden channels keep their random init but are not read by the output
/// layer, so the network starts as that copy on non-negative inputs.
pub fn copy_init(net: &mut Network32, offset: usize) {
    let n = net.params().len();
    for (k, p) in net.params_mut().iter_mut().enumerate() {
        let rows = p.shape()[0].min(3);
        if p.rank() == 1 {
            p.data_mut()[..rows].fill(0.0);
            continue;
        }
        let cin = p.shape()[1];
        let per_row = cin * 9;
        let src = if k == 0 { offset } else { 0 };
        if k == n - 2 {
            p.data_mut().fill(0.0);
        }
        for r in 0..rows {
            let row = &mut p.data_mut()[r * per_row..(r + 1) * per_row];
            row.fill(0.0);
            row[(r + src) * 9 + 4] = 1.0;
        }
    }
}

impl Shapes {
    /// A freshly initialized network for `role`.
    pub fn build(&self, role: Role, seed: u64) -> Result<Network32> {
        let net = match role {
            Role::PretrainedTransform | Role::Transform => nn::build_transform_net(self.scale, seed)?,
            Role::PretrainedDiscriminator | Role::Discriminator => nn::build_discriminator(self.scale, seed)?,
            Role::Reconstruction => nn::build_reconstruction_net(self.scale, seed)?,
            Role::Denoiser => {
                let mut f = nn::build_denoising_net(self.resolution, self.denoiser_width, seed)?;
                copy_init(&mut f, 0);
                f
            }
            Role::Embedder | Role::EvalEmbedder => nn::build_identity_embedder(self.scale, self.n_identities, seed)?,
            Role::AttributeClassifier => {
                Network32::new("attribute_classifier", attribute_classifier_spec(self.resolution)?, seed)?
            }
            // Starts as E(T(x), x) = T(x): the attribute edit is kept and
            // training only has to restore the input outside the mask.
            Role::LocalEnhancer => {
                let mut e = nn::build_local_enhancer(self.resolution, self.enhancer_width, seed)?;
                copy_init(&mut e, 0);
                e
            }
            Role::GlobalEnhancer => nn::build_global_enhancer(self.scale, seed)?,
        };
        Ok(net)
    }

    /// Loads `role` from `dir`, naming the producing phase if it is absent.
    pub fn load(&self, role: Role, dir: &Path) -> Result<(Network32, Checkpoint<f32>)> {
        let path = role.path(dir);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "{} not found; run the {} phase first",
                path.display(),
                role.phase()
            )));
        }
        let ckpt = Checkpoint::<f32>::load(&path)?;
        let mut net = self.build(role, 0)?;
        ckpt.restore_into(&mut net)?;
        Ok((net, ckpt))
    }
}

pub fn save(net: &Network32, role: Role, dir: &Path, step: u64) -> Result<PathBuf> {
    let path = role.path(dir);
    Checkpoint::of(net, step).save(&path)?;
    Ok(path)
}
