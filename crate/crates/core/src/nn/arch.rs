//! The architectures used by the attribute-transfer pipeline.
//!
//! Base channel counts and resolutions are the full-size ones (128x128
//! inputs); a [`Scale`] shrinks both. Image channel counts (3 in, 3 out, 6
//! for the two-image enhancer input) and single-unit heads are never scaled.

use super::network::Network;
use super::spec::{Activation, LayerKind, LayerSpec, NetworkSpec, Scale};
use crate::error::Result;
use crate::scalar::Scalar;

pub const BASE_RESOLUTION: usize = 128;
pub const DISCRIMINATOR_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorOptions {
    /// Normalization after every conv/deconv except the output layer.
    pub norm: bool,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self { norm: true }
    }
}

fn conv(channels: usize, kernel: usize, pad: usize, stride: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::Conv {
        channels,
        kernel,
        pad,
        stride,
    })
}

fn deconv(channels: usize, kernel: usize, pad: usize, stride: usize, out_pad: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::Deconv {
        channels,
        kernel,
        pad,
        stride,
        out_pad,
    })
}

fn act(a: Activation) -> LayerSpec {
    LayerSpec::new(LayerKind::Activation(a))
}

fn tap(mut layer: LayerSpec, name: &str) -> LayerSpec {
    layer.tap = Some(name.to_string());
    layer
}

/// Residual encoder/decoder: 3 convs, 5 residual blocks, 3 deconvs.
///
/// The two stride-2 deconvs use output padding 1 and 0 respectively, which
/// reproduces the 64 and 127 extents of the reference table at full size.
pub fn transform_spec(scale: Scale, opts: GeneratorOptions) -> Result<NetworkSpec> {
    let res = scale.resolution(BASE_RESOLUTION)?;
    let (c32, c64, c128) = (scale.channels(32), scale.channels(64), scale.channels(128));
    let mut layers = Vec::new();
    let normed = |layer: LayerSpec, layers: &mut Vec<LayerSpec>| {
        layers.push(layer);
        if opts.norm {
            layers.push(LayerSpec::new(LayerKind::Norm));
        }
        layers.push(act(Activation::Relu));
    };
    normed(conv(c32, 9, 4, 1), &mut layers);
    normed(conv(c64, 3, 1, 2), &mut layers);
    normed(conv(c128, 3, 1, 2), &mut layers);
    for _ in 0..5 {
        layers.push(LayerSpec::new(LayerKind::ResidualBlock {
            channels: c128,
            norm: opts.norm,
        }));
    }
    normed(deconv(c64, 3, 1, 2, 1), &mut layers);
    normed(deconv(c32, 3, 1, 2, 0), &mut layers);
    layers.push(deconv(3, 10, 4, 1, 0));
    layers.push(act(Activation::Sigmoid));
    let spec = NetworkSpec {
        input: [3, res, res],
        layers,
        scale,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Six strided convs, two dense layers and a sigmoid probability head.
/// Conv outputs (after activation) are tapped as `conv1`..`conv6`.
pub fn discriminator_spec(scale: Scale) -> Result<NetworkSpec> {
    let res = scale.resolution(BASE_RESOLUTION)?;
    let (c32, c64, c128) = (scale.channels(32), scale.channels(64), scale.channels(128));
    let lrelu = || act(Activation::LeakyRelu(DISCRIMINATOR_SLOPE));
    let convs = [
        conv(c32, 8, 3, 2),
        conv(c32, 3, 1, 1),
        conv(c64, 4, 1, 2),
        conv(c64, 3, 1, 1),
        conv(c128, 4, 1, 2),
        conv(c128, 4, 1, 2),
    ];
    let mut layers = Vec::new();
    for (i, c) in convs.into_iter().enumerate() {
        layers.push(c);
        layers.push(tap(lrelu(), &format!("conv{}", i + 1)));
    }
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Dense {
        units: scale.channels(1000),
    }));
    layers.push(lrelu());
    layers.push(LayerSpec::new(LayerKind::Dense { units: 1 }));
    layers.push(act(Activation::Sigmoid));
    let spec = NetworkSpec {
        input: [3, res, res],
        layers,
        scale,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Two 3x3 convs mapping an image to an image of the same size.
pub fn denoiser_spec(resolution: usize, width: usize) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input: [3, resolution, resolution],
        layers: vec![conv(width, 3, 1, 1), act(Activation::Relu), conv(3, 3, 1, 1)],
        scale: Scale::ONE,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Four 3x3 convs over the channel concatenation of the transformed and
/// the source image, producing an image.
pub fn local_enhancer_spec(resolution: usize, width: usize) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input: [6, resolution, resolution],
        layers: vec![
            conv(width, 3, 1, 1),
            act(Activation::Relu),
            conv(width, 3, 1, 1),
            act(Activation::Relu),
            conv(width, 3, 1, 1),
            act(Activation::Relu),
            conv(3, 3, 1, 1),
        ],
        scale: Scale::ONE,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Five 3x3 convs (taps `conv1`..`conv5`) then a pooled linear classifier
/// over `n_identities`; a stand-in for a pretrained face-recognition CNN.
pub fn identity_embedder_spec(scale: Scale, n_identities: usize) -> Result<NetworkSpec> {
    let res = scale.resolution(BASE_RESOLUTION)?;
    let plan = [
        (scale.channels(64), 1),
        (scale.channels(64), 2),
        (scale.channels(128), 1),
        (scale.channels(128), 2),
        (scale.channels(256), 1),
    ];
    let mut layers = Vec::new();
    for (i, (c, stride)) in plan.into_iter().enumerate() {
        layers.push(conv(c, 3, 1, stride));
        layers.push(tap(act(Activation::Relu), &format!("conv{}", i + 1)));
    }
    layers.push(tap(LayerSpec::new(LayerKind::GlobalAvgPool), "embedding"));
    layers.push(LayerSpec::new(LayerKind::Dense { units: n_identities }));
    let spec = NetworkSpec {
        input: [3, res, res],
        layers,
        scale,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

pub fn build_transform_net<S: Scalar>(scale: Scale, seed: u64) -> Result<Network<S>> {
    Network::new("transform", transform_spec(scale, GeneratorOptions::default())?, seed)
}

pub fn build_discriminator<S: Scalar>(scale: Scale, seed: u64) -> Result<Network<S>> {
    Network::new("discriminator", discriminator_spec(scale)?, seed)
}

/// Same architecture as the transform network, independent parameters.
pub fn build_reconstruction_net<S: Scalar>(scale: Scale, seed: u64) -> Result<Network<S>> {
    Network::new("reconstruction", transform_spec(scale, GeneratorOptions::default())?, seed)
}

pub fn build_denoising_net<S: Scalar>(resolution: usize, width: usize, seed: u64) -> Result<Network<S>> {
    Network::new("denoiser", denoiser_spec(resolution, width)?, seed)
}

pub fn build_local_enhancer<S: Scalar>(resolution: usize, width: usize, seed: u64) -> Result<Network<S>> {
    Network::new("local_enhancer", local_enhancer_spec(resolution, width)?, seed)
}

/// The transform layer table without normalization: restoring a blurred
/// image needs the per-image intensity statistics that normalization drops.
pub fn build_global_enhancer<S: Scalar>(scale: Scale, seed: u64) -> Result<Network<S>> {
    Network::new("global_enhancer", transform_spec(scale, GeneratorOptions { norm: false })?, seed)
}

pub fn build_identity_embedder<S: Scalar>(scale: Scale, n_identities: usize, seed: u64) -> Result<Network<S>> {
    Network::new("identity_embedder", identity_embedder_spec(scale, n_identities)?, seed)
}
