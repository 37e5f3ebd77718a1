//! Network specifications, instantiated networks, the concrete
//! architectures, and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod network;
pub mod spec;

pub use arch::{
    build_denoising_net, build_discriminator, build_global_enhancer, build_identity_embedder,
    build_local_enhancer, build_reconstruction_net, build_transform_net, discriminator_spec,
    transform_spec, GeneratorOptions,
};
pub use checkpoint::{Checkpoint, RngState};
pub use network::{param_layout, Forward, Network, ParamMode, NORM_EPS};
pub use spec::{Activation, LayerKind, LayerSpec, NetworkSpec, Scale, TableRow};
