//! Training configuration and the per-variant contract.

use std::fmt;
use std::str::FromStr;

use diat_core::losses::LossConfig;
use diat_core::Scale;
use diat_data::Target;

use crate::error::{config_err, Error, Result};

/// Learning rate of both networks in the adaptive variants.
pub const ADAPTIVE_LR: f64 = 1e-5;
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Identity loss on the embedder, smoothness term, enhancer.
    Diat,
    /// Adaptive identity loss on the discriminator, no smoothness term,
    /// reduced rates, enhancer.
    DiatA,
    /// `DiatA` without the enhancer.
    DiatA0,
    /// Attribute (adversarial) loss only.
    Diat1,
    /// No smoothness term, no enhancer.
    Diat2,
    /// `Diat` without the enhancer.
    Diat3,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::Diat, Self::DiatA, Self::DiatA0, Self::Diat1, Self::Diat2, Self::Diat3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Diat => "DIAT",
            Self::DiatA => "DIAT-A",
            Self::DiatA0 => "DIAT-A0",
            Self::Diat1 => "DIAT1",
            Self::Diat2 => "DIAT2",
            Self::Diat3 => "DIAT3",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Self::DiatA | Self::DiatA0)
    }

    pub fn has_identity_term(self) -> bool {
        self != Self::Diat1
    }

    pub fn has_smooth_term(self) -> bool {
        matches!(self, Self::Diat | Self::Diat3)
    }

    pub fn has_enhancer(self) -> bool {
        matches!(self, Self::Diat | Self::DiatA)
    }

    /// Needs the frozen embedder and denoiser during transform training.
    pub fn needs_regularizer(self) -> bool {
        self.has_smooth_term()
    }

    pub fn needs_embedder(self) -> bool {
        self.has_identity_term() && !self.is_adaptive()
    }

    pub fn default_lr(self) -> f64 {
        if self.is_adaptive() {
            ADAPTIVE_LR
        } else {
            DEFAULT_LR
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnhanceMode {
    /// Local for local attributes, global otherwise.
    Auto,
    Local,
    Global,
    None,
}

impl EnhanceMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Auto => "auto",
            Self::Local => "local",
            Self::Global => "global",
            Self::None => "none",
        }
    }
}

impl fmt::Display for EnhanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnhanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Auto, Self::Local, Self::Global, Self::None]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown enhancement mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weights before the variant contract is applied; see [`Self::loss`].
    pub loss: LossConfig,
    /// `None` selects the variant's default rate.
    pub lr_transform: Option<f64>,
    pub lr_discriminator: Option<f64>,
    /// Rate of every pretraining phase.
    pub lr_pretrain: f64,
    pub lr_enhancer: f64,
    /// Multiplies the feature term of the local enhancement loss on top of
    /// its per-layer weights.
    pub enhance_feature_scale: f64,
    pub dstep: u32,
    pub tstep: u32,
    pub batch: usize,
    pub max_iterations: u64,
    pub pretrain_transform_steps: u64,
    pub pretrain_discriminator_steps: u64,
    pub embedder_steps: u64,
    pub classifier_steps: u64,
    pub reconstruction_steps: u64,
    pub denoiser_steps: u64,
    pub enhancer_steps: u64,
    pub seed: u64,
    pub scale: Scale,
    pub target: Target,
    pub enhancement: EnhanceMode,
    pub input_limit: usize,
    pub denoiser_width: usize,
    pub enhancer_width: usize,
    /// Attribute score needed before the plateau rule may stop training.
    pub success_threshold: f64,
    pub plateau_window: u64,
    pub plateau_min_delta: f64,
    /// Outer iterations between attribute-score evaluations.
    pub score_every: u64,
    /// Fixed input images the attribute score is measured on.
    pub monitor_size: usize,
    /// Outer iterations between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(Variant::Diat)
    }
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            loss: LossConfig::default(),
            lr_transform: None,
            lr_discriminator: None,
            lr_pretrain: 1e-3,
            lr_enhancer: 1e-3,
            enhance_feature_scale: 100.0,
            dstep: 1,
            tstep: 2,
            batch: 16,
            max_iterations: 3000,
            pretrain_transform_steps: 2000,
            pretrain_discriminator_steps: 300,
            embedder_steps: 1500,
            classifier_steps: 400,
            reconstruction_steps: 400,
            denoiser_steps: 600,
            enhancer_steps: 1200,
            seed: 0,
            scale: Scale::DESK,
            target: Target::new(diat_data::Attribute::Glasses, false),
            enhancement: EnhanceMode::Auto,
            input_limit: diat_data::DEFAULT_INPUT_LIMIT,
            denoiser_width: 32,
            enhancer_width: 16,
            success_threshold: 0.85,
            plateau_window: 200,
            plateau_min_delta: 0.005,
            score_every: 10,
            monitor_size: 64,
            checkpoint_every: 0,
        }
    }

    /// Loss weights after the variant contract: the identity weight is
    /// zeroed for attribute-only training and the smoothness weight for
    /// every variant without perceptual regularization.
    pub fn loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        if !self.variant.has_identity_term() {
            l.lambda = 0.0;
        }
        if !self.variant.has_smooth_term() {
            l.gamma = 0.0;
        }
        l
    }

    pub fn lr_transform(&self) -> f64 {
        self.lr_transform.unwrap_or(self.variant.default_lr())
    }

    pub fn lr_discriminator(&self) -> f64 {
        self.lr_discriminator.unwrap_or(self.variant.default_lr())
    }

    /// The enhancer used at inference, after the variant contract.
    pub fn enhancement(&self) -> EnhanceMode {
        if !self.variant.has_enhancer() {
            return EnhanceMode::None;
        }
        match self.enhancement {
            EnhanceMode::Auto if self.target.attribute.is_local() => EnhanceMode::Local,
            EnhanceMode::Auto => EnhanceMode::Global,
            m => m,
        }
    }

    pub fn resolution(&self) -> Result<usize> {
        Ok(self.scale.resolution(diat_core::nn::arch::BASE_RESOLUTION)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_enhancer", self.lr_enhancer),
            ("enhance_feature_scale", self.enhance_feature_scale),
            ("lr_transform", self.lr_transform()),
            ("lr_discriminator", self.lr_discriminator()),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return config_err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.dstep == 0 || self.tstep == 0 {
            return config_err("dstep and tstep must be at least 1");
        }
        if self.batch < 2 {
            return config_err("batch must be at least 2");
        }
        if self.score_every == 0 || self.monitor_size == 0 {
            return config_err("score_every and monitor_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return config_err("success_threshold must lie in [0,1]");
        }
        if self.plateau_min_delta < 0.0 {
            return config_err("plateau_min_delta must be non-negative");
        }
        if self.input_limit == 0 || self.denoiser_width == 0 || self.enhancer_width == 0 {
            return config_err("input_limit and network widths must be at least 1");
        }
        if self.enhancement == EnhanceMode::Local && !self.target.attribute.is_local() {
            return config_err(format!("local enhancement needs a local attribute, {} is global", self.target.attribute));
        }
        self.resolution()?;
        Ok(())
    }
}
