//! Run configuration: a line-oriented `key = value` file.
//!
//! Values are resolved in three layers, later ones winning: built-in
//! defaults, then the `--config` file, then each `--set key=value` flag in
//! order. Text after `#` on a line is a comment, blank lines are ignored,
//! and unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use diat_core::losses::GeneratorLoss;
use diat_core::Scale;
use diat_data::{GeneratorConfig, Marginals, Target};
use diat_pipeline::{EnhanceMode, TrainConfig, Variant};
use log::LevelFilter;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub log_level: LevelFilter,
    pub data_seed: u64,
    pub samples: usize,
    pub identities: usize,
    pub marginals: Marginals,
    /// Held-out inputs scored by `eval`.
    pub eval_count: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = GeneratorConfig::default();
        Self {
            data_root: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
            log_level: LevelFilter::Info,
            data_seed: data.seed,
            samples: data.n,
            identities: data.n_identities,
            marginals: data.marginals,
            eval_count: diat_pipeline::workflow::HELDOUT_INPUTS,
            train: TrainConfig::default(),
        }
    }
}

/// A config value with a textual form that parses back to itself.
trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> Result<Self, String>;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
        }
    )*};
}

display_value!(u64, u32, usize, bool, Scale, Target, Variant, EnhanceMode);

impl Value for f64 {
    fn show(&self) -> String {
        format!("{self:?}")
    }
    fn read(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("expected a number, got {s:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("expected a finite number, got {s:?}"))
        }
    }
}

impl Value for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
    fn read(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
}

impl Value for LevelFilter {
    fn show(&self) -> String {
        self.as_str().to_ascii_lowercase()
    }
    fn read(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("expected off, error, warn, info, debug or trace, got {s:?}"))
    }
}

/// `auto` selects the variant's default rate.
impl Value for Option<f64> {
    fn show(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.show())
    }
    fn read(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            f64::read(s).map(Some)
        }
    }
}

impl Value for GeneratorLoss {
    fn show(&self) -> String {
        match self {
            GeneratorLoss::Saturating => "saturating",
            GeneratorLoss::NonSaturating => "non_saturating",
        }
        .into()
    }
    fn read(s: &str) -> Result<Self, String> {
        match s {
            "saturating" => Ok(GeneratorLoss::Saturating),
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            _ => Err(format!("expected saturating or non_saturating, got {s:?}")),
        }
    }
}

impl<const N: usize> Value for [f64; N] {
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(", ")
    }
    fn read(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s.split(',').map(|p| f64::read(p.trim())).collect::<Result<_, _>>()?;
        parts.try_into().map_err(|p: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", p.len()))
    }
}

impl Value for Marginals {
    fn show(&self) -> String {
        self.0.show()
    }
    fn read(s: &str) -> Result<Self, String> {
        <[f64; 4]>::read(s).map(Marginals)
    }
}

struct Field {
    key: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

macro_rules! field {
    ($key:literal, $doc:literal, $($path:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| Value::show(&c.$($path).+),
            set: |c, s| {
                c.$($path).+ = Value::read(s)?;
                Ok(())
            },
        }
    };
}

const SECTIONS: &[(&str, &[Field])] = &[
    (
        "paths and logging",
        &[
            field!("data_root", "Directory holding the generated dataset.", data_root),
            field!("checkpoint_dir", "Directory holding every network checkpoint.", checkpoint_dir),
            field!("report_dir", "Directory for reports, mosaics and config snapshots.", report_dir),
            field!("log_level", "off, error, warn, info, debug or trace; RUST_LOG overrides it.", log_level),
        ],
    ),
    (
        "dataset",
        &[
            field!("data_seed", "Seed of the synthetic face generator.", data_seed),
            field!("samples", "Number of generated training images.", samples),
            field!("identities", "Number of distinct synthetic identities.", identities),
            field!(
                "marginals",
                "Probability of glasses, mouth_open, elderly and male, in that order.",
                marginals
            ),
            field!("eval_count", "Held-out inputs transferred and scored by eval.", eval_count),
        ],
    ),
    (
        "run",
        &[
            field!("variant", "DIAT, DIAT-A, DIAT-A0, DIAT1, DIAT2 or DIAT3.", train.variant),
            field!("target", "Attribute state to produce, e.g. no_glasses or elderly.", train.target),
            field!("scale", "Width and resolution factor; 1/4 gives 32x32 images.", train.scale),
            field!("seed", "Seed of network init, batch sampling and training.", train.seed),
            field!(
                "enhancement",
                "auto, local, global or none; auto follows the attribute's locality.",
                train.enhancement
            ),
        ],
    ),
    (
        "losses",
        &[
            field!("lambda", "Weight of the identity term.", train.loss.lambda),
            field!("gamma", "Weight of the smoothness term.", train.loss.gamma),
            field!("identity_weights", "Weights of the conv4 and conv5 identity features.", train.loss.identity_weights),
            field!("beta", "Weights of the conv1..conv3 features in local enhancement.", train.loss.beta),
            field!("sigma", "Gaussian blur standard deviation for global enhancement.", train.loss.sigma),
            field!("generator_loss", "saturating or non_saturating adversarial term.", train.loss.generator_loss),
            field!(
                "adaptive_in_discriminator",
                "Let the adaptive identity term also update the discriminator.",
                train.loss.adaptive_in_discriminator
            ),
        ],
    ),
    (
        "optimization",
        &[
            field!("lr_transform", "Transform learning rate; auto picks the variant default.", train.lr_transform),
            field!("lr_discriminator", "Discriminator learning rate; auto picks the variant default.", train.lr_discriminator),
            field!("lr_pretrain", "Learning rate of every pretraining phase.", train.lr_pretrain),
            field!("lr_enhancer", "Learning rate of enhancer training.", train.lr_enhancer),
            field!(
                "enhance_feature_scale",
                "Multiplier on the feature term of local enhancement.",
                train.enhance_feature_scale
            ),
            field!("dstep", "Discriminator updates per outer iteration.", train.dstep),
            field!("tstep", "Transform updates per outer iteration.", train.tstep),
            field!("batch", "Minibatch size of every phase.", train.batch),
            field!("max_iterations", "Outer iteration budget of transform training.", train.max_iterations),
            field!("pretrain_transform_steps", "Reconstruction pretraining steps of the transform.", train.pretrain_transform_steps),
            field!(
                "pretrain_discriminator_steps",
                "Supervised pretraining steps of the discriminator.",
                train.pretrain_discriminator_steps
            ),
            field!("embedder_steps", "Training steps of each identity embedder.", train.embedder_steps),
            field!("classifier_steps", "Training steps of the evaluation attribute classifier.", train.classifier_steps),
            field!("reconstruction_steps", "Training steps of the reconstruction network.", train.reconstruction_steps),
            field!("denoiser_steps", "Training steps of the denoiser.", train.denoiser_steps),
            field!("enhancer_steps", "Training steps of the enhancer.", train.enhancer_steps),
        ],
    ),
    (
        "model and stopping",
        &[
            field!("input_limit", "Cap on the transform training input set.", train.input_limit),
            field!("denoiser_width", "Hidden channels of the denoiser.", train.denoiser_width),
            field!("enhancer_width", "Hidden channels of the local enhancer.", train.enhancer_width),
            field!(
                "success_threshold",
                "Attribute score after which the plateau rule may stop training.",
                train.success_threshold
            ),
            field!("plateau_window", "Iterations without improvement before a plateau stop.", train.plateau_window),
            field!("plateau_min_delta", "Score gain that counts as improvement.", train.plateau_min_delta),
            field!("score_every", "Outer iterations between attribute-score measurements.", train.score_every),
            field!("monitor_size", "Training inputs the attribute score is measured on.", train.monitor_size),
            field!("checkpoint_every", "Outer iterations between checkpoints; 0 saves only at the end.", train.checkpoint_every),
        ],
    ),
];

fn fields() -> impl Iterator<Item = &'static Field> {
    SECTIONS.iter().flat_map(|(_, f)| f.iter())
}

fn find(key: &str) -> Result<&'static Field, CliError> {
    fields()
        .find(|f| f.key == key)
        .ok_or_else(|| CliError::config(format!("unknown key {key:?}")))
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        fields().map(|f| f.key).collect()
    }

    pub fn get(&self, key: &str) -> Result<String, CliError> {
        Ok((find(key)?.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        (find(key)?.set)(self, value).map_err(|e| CliError::config(format!("{key}: {e}")))
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {pair:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::config(format!("line {}: {msg}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(at(format!("key {k:?} repeated")));
            }
            self.set(k, v.trim()).map_err(|e| at(e.message))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    /// Every key with its documentation, grouped by section.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, (section, fields)) in SECTIONS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "## {section}");
            for f in fields.iter() {
                let _ = writeln!(out, "\n# {}\n{} = {}", f.doc, f.key, (f.get)(self));
            }
        }
        out
    }

    pub fn generator(&self) -> Result<GeneratorConfig, CliError> {
        Ok(GeneratorConfig {
            seed: self.data_seed,
            n: self.samples,
            size: self.train.resolution()?,
            n_identities: self.identities,
            marginals: self.marginals,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.generator()?.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.eval_count == 0 {
            return Err(CliError::config("eval_count must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn keys_are_unique() {
        let keys = RunConfig::keys();
        let set: std::collections::HashSet<_> = keys.iter().collect();
        assert_eq!(set.len(), keys.len());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = RunConfig::parse("# header\n\nlambda = 0.25 # trailing\n  seed=7\n").unwrap();
        assert_eq!(c.train.loss.lambda, 0.25);
        assert_eq!(c.train.seed, 7);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(e.message.contains("line 2") && e.message.contains("bogus"), "{}", e.message);
        let e = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.message.contains("repeated"));
        let e = RunConfig::parse("seed 1\n").unwrap_err();
        assert!(e.message.contains("line 1"));
        assert!(RunConfig::parse("beta = 1, 2\n").is_err());
        assert!(RunConfig::parse("lambda = nan\n").is_err());
    }

    #[test]
    fn auto_rates() {
        let mut c = RunConfig::default();
        assert_eq!(c.get("lr_transform").unwrap(), "auto");
        c.set_pair("lr_transform=3e-4").unwrap();
        assert_eq!(c.train.lr_transform, Some(3e-4));
        c.set_pair("lr_transform = auto").unwrap();
        assert_eq!(c.train.lr_transform, None);
    }
}
