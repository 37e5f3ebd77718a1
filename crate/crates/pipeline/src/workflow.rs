//! The phases behind each command, wired to datasets and checkpoints.
//!
//! Pretraining covers every network the later phases depend on: T and D,
//! the training embedder, the regularizer pair, and the evaluation
//! networks. The evaluation networks are trained on a second dataset
//! drawn with a different seed so no metric shares data with training.

use std::path::Path;

use diat_core::Network32;
use diat_data::{identity_split, render_sample, split_guided_and_input, Dataset, GeneratorConfig, Split, Target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EnhanceMode, TrainConfig};
use crate::enhance;
use crate::error::{config_err, Result};
use crate::eval::{self, Evaluator, Metrics};
use crate::nets::{self, Role, Shapes};
use crate::phases::{self, PhaseReport, Regularizer, Schedule};
use crate::train::{Auxiliary, TransformTrainer};
use crate::transfer;

type Data = Dataset<f32>;

/// Added to the dataset seed to draw the evaluation dataset.
pub const EVAL_SEED_OFFSET: u64 = 0x0e7a_1000;
/// Held-out transfer inputs used by evaluation.
pub const HELDOUT_INPUTS: usize = 200;

/// Network initialization seed of `role` in a run seeded with `seed`.
pub fn init_seed(seed: u64, role: Role) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (role as u64 + 1)
}

/// Phase RNG; each phase draws from its own stream.
fn phase_rng(seed: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + role as u64);
    rng
}

pub fn shapes(cfg: &TrainConfig, data: &Data) -> Result<Shapes> {
    let resolution = cfg.resolution()?;
    if data.config.size != resolution {
        return config_err(format!(
            "dataset images are {0}x{0} but scale {1} needs {2}x{2}",
            data.config.size, cfg.scale, resolution
        ));
    }
    Ok(Shapes {
        scale: cfg.scale,
        resolution,
        n_identities: data.config.n_identities,
        denoiser_width: cfg.denoiser_width,
        enhancer_width: cfg.enhancer_width,
    })
}

/// The dataset the evaluation networks are trained on.
pub fn eval_dataset(data: &GeneratorConfig) -> Result<Data> {
    let cfg = GeneratorConfig { seed: data.seed.wrapping_add(EVAL_SEED_OFFSET), ..data.clone() };
    Ok(Dataset::generate(&cfg)?)
}

/// Samples of training identities, split into every fifth held out and
/// the rest.
fn sample_split(data: &Data) -> (Vec<usize>, Vec<usize>) {
    let (train_ids, _) = data.partition_by_identity();
    let (held, train): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
        train_ids.into_iter().enumerate().partition(|(k, _)| k % 5 == 4);
    (train.into_iter().map(|p| p.1).collect(), held.into_iter().map(|p| p.1).collect())
}

/// Input and guided sets for transform training, over training identities.
pub fn transform_split(cfg: &TrainConfig, data: &Data) -> Split {
    let (train_ids, _) = data.partition_by_identity();
    split_guided_and_input(&data.labels(), train_ids, cfg.target, Some(cfg.input_limit), cfg.seed)
}

/// The first `count` samples past the dataset, from held-out identities
/// and not yet in the `target` state.
pub fn heldout_inputs(data: &GeneratorConfig, target: Target, count: usize) -> Result<Data> {
    let (_, held) = identity_split(data.n_identities);
    if held.is_empty() {
        return config_err("no held-out identities");
    }
    let mut samples = Vec::with_capacity(count);
    let mut index = data.n;
    while samples.len() < count {
        let (identity, attrs, _) = data.sample_spec(index);
        if held.contains(&identity) && !target.satisfied_by(&attrs) {
            samples.push(render_sample(data, index)?);
        }
        index += 1;
    }
    Ok(Dataset { config: data.clone(), samples })
}

pub struct Pretrained {
    pub transform: Network32,
    pub discriminator: Network32,
    pub embedder: Network32,
    pub regularizer: Regularizer,
    pub classifier: Network32,
    pub eval_embedder: Network32,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    /// Held-out per-value MSE.
    pub transform: PhaseReport,
    /// Held-out accuracy on the target state.
    pub discriminator: PhaseReport,
    /// Held-out identity accuracy.
    pub embedder: PhaseReport,
    pub reconstruction_losses: Vec<f64>,
    pub denoiser_losses: Vec<f64>,
    /// Mean `||f(x) - x||^2` per value on held-out clean images.
    pub denoiser_residual: f64,
    /// Held-out accuracy of the evaluation classifier on raw labels.
    pub classifier: PhaseReport,
    pub eval_embedder: PhaseReport,
}

impl PretrainSummary {
    pub fn to_tsv(&self) -> String {
        let rows = [
            ("transform_mse", self.transform.initial, self.transform.heldout),
            ("discriminator_accuracy", self.discriminator.initial, self.discriminator.heldout),
            ("embedder_accuracy", self.embedder.initial, self.embedder.heldout),
            ("classifier_accuracy", self.classifier.initial, self.classifier.heldout),
            ("eval_embedder_accuracy", self.eval_embedder.initial, self.eval_embedder.heldout),
        ];
        let mut out = String::from("metric\tinitial\tfinal\n");
        for (name, a, b) in rows {
            out.push_str(&format!("{name}\t{a}\t{b}\n"));
        }
        out.push_str(&format!("denoiser_residual\t-\t{}\n", self.denoiser_residual));
        out
    }
}

/// Runs every pretraining phase on `data` (and the evaluation dataset).
pub fn pretrain(cfg: &TrainConfig, data: &Data) -> Result<(Pretrained, PretrainSummary)> {
    cfg.validate()?;
    let shapes = shapes(cfg, data)?;
    let sched = |steps| Schedule { steps, batch: cfg.batch, lr: cfg.lr_pretrain };
    let build = |role| shapes.build(role, init_seed(cfg.seed, role));
    let (train, held) = sample_split(data);

    let mut t = build(Role::PretrainedTransform)?;
    let mut rng = phase_rng(cfg.seed, Role::PretrainedTransform);
    let t_report = phases::pretrain_transform(&mut t, data, &train, &held, sched(cfg.pretrain_transform_steps), &mut rng)?;

    let mut d = build(Role::PretrainedDiscriminator)?;
    let mut rng = phase_rng(cfg.seed, Role::PretrainedDiscriminator);
    let d_sched = sched(cfg.pretrain_discriminator_steps);
    let d_report = phases::pretrain_discriminator(&mut d, data, cfg.target, &train, &held, d_sched, &mut rng)?;

    let mut phi = build(Role::Embedder)?;
    let mut rng = phase_rng(cfg.seed, Role::Embedder);
    let phi_report = phases::train_embedder(&mut phi, data, &train, &held, sched(cfg.embedder_steps), &mut rng)?;

    let mut reg = Regularizer::new(build(Role::Reconstruction)?, build(Role::Denoiser)?);
    let mut rng = phase_rng(cfg.seed, Role::Reconstruction);
    let weights = cfg.loss.identity_weights;
    let g_losses = reg.train_reconstruction(&phi, weights, data, &train, sched(cfg.reconstruction_steps), &mut rng)?;
    reg.freeze();
    let mut rng = phase_rng(cfg.seed, Role::Denoiser);
    let f_losses = reg.train_denoiser(data, &train, sched(cfg.denoiser_steps), &mut rng)?;
    let residual = phases::denoiser_residual(&reg.f, &data.images(&held)?)?;

    let eval_data = eval_dataset(&data.config)?;
    let (etrain, eheld) = sample_split(&eval_data);
    let mut c = build(Role::AttributeClassifier)?;
    let mut rng = phase_rng(cfg.seed, Role::AttributeClassifier);
    let attr = cfg.target.attribute;
    let c_report =
        phases::train_attribute_classifier(&mut c, &eval_data, attr, &etrain, &eheld, sched(cfg.classifier_steps), &mut rng)?;
    let mut phi_eval = build(Role::EvalEmbedder)?;
    let mut rng = phase_rng(cfg.seed, Role::EvalEmbedder);
    let pe_report = phases::train_embedder(&mut phi_eval, &eval_data, &etrain, &eheld, sched(cfg.embedder_steps), &mut rng)?;

    let nets = Pretrained {
        transform: t,
        discriminator: d,
        embedder: phi,
        regularizer: reg,
        classifier: c,
        eval_embedder: phi_eval,
    };
    let summary = PretrainSummary {
        transform: t_report,
        discriminator: d_report,
        embedder: phi_report,
        reconstruction_losses: g_losses,
        denoiser_losses: f_losses,
        denoiser_residual: residual,
        classifier: c_report,
        eval_embedder: pe_report,
    };
    Ok((nets, summary))
}

impl Pretrained {
    fn roles(&self) -> [(Role, &Network32); 7] {
        [
            (Role::PretrainedTransform, &self.transform),
            (Role::PretrainedDiscriminator, &self.discriminator),
            (Role::Embedder, &self.embedder),
            (Role::Reconstruction, &self.regularizer.g),
            (Role::Denoiser, &self.regularizer.f),
            (Role::AttributeClassifier, &self.classifier),
            (Role::EvalEmbedder, &self.eval_embedder),
        ]
    }

    pub fn save(&self, dir: &Path, steps: &TrainConfig) -> Result<()> {
        for (role, net) in self.roles() {
            let step = match role {
                Role::PretrainedTransform => steps.pretrain_transform_steps,
                Role::PretrainedDiscriminator => steps.pretrain_discriminator_steps,
                Role::Embedder | Role::EvalEmbedder => steps.embedder_steps,
                Role::Reconstruction => steps.reconstruction_steps,
                Role::Denoiser => steps.denoiser_steps,
                _ => steps.classifier_steps,
            };
            nets::save(net, role, dir, step)?;
        }
        Ok(())
    }

    pub fn load(shapes: &Shapes, dir: &Path) -> Result<Self> {
        let load = |role| shapes.load(role, dir).map(|(net, _)| net);
        Ok(Self {
            transform: load(Role::PretrainedTransform)?,
            discriminator: load(Role::PretrainedDiscriminator)?,
            embedder: load(Role::Embedder)?,
            regularizer: Regularizer::trained(load(Role::Reconstruction)?, load(Role::Denoiser)?),
            classifier: load(Role::AttributeClassifier)?,
            eval_embedder: load(Role::EvalEmbedder)?,
        })
    }

    pub fn auxiliary(&self) -> Auxiliary<'_> {
        Auxiliary {
            embedder: Some(&self.embedder),
            denoiser: Some(&self.regularizer.f),
            classifier: &self.classifier,
            eval_embedder: &self.eval_embedder,
        }
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator { classifier: &self.classifier, embedder: &self.eval_embedder }
    }

    /// A trainer starting from the pretrained T and D.
    pub fn trainer<'a>(&'a self, cfg: &TrainConfig, data: &'a Data, split: &Split) -> Result<TransformTrainer<'a>> {
        let (t, d) = (self.transform.clone(), self.discriminator.clone());
        TransformTrainer::new(cfg, t, d, self.auxiliary(), data, split)
    }
}

/// Trains the enhancer the configuration calls for; `None` when the
/// variant has no enhancement stage.
pub fn train_enhancer(
    cfg: &TrainConfig,
    data: &Data,
    t: &Network32,
    pre: &Pretrained,
) -> Result<Option<(Role, Network32, Vec<f64>)>> {
    let shapes = shapes(cfg, data)?;
    let sched = Schedule { steps: cfg.enhancer_steps, batch: cfg.batch, lr: cfg.lr_enhancer };
    match cfg.enhancement() {
        EnhanceMode::None => Ok(None),
        EnhanceMode::Local => {
            let role = Role::LocalEnhancer;
            let mut e = shapes.build(role, init_seed(cfg.seed, role))?;
            let mut rng = phase_rng(cfg.seed, role);
            let split = transform_split(cfg, data);
            let attr = cfg.target.attribute;
            let beta = cfg.loss.beta.map(|b| b * cfg.enhance_feature_scale);
            let losses = enhance::train_local_enhancer(&mut e, t, &pre.embedder, beta, attr, data, &split.input, sched, &mut rng)?;
            Ok(Some((role, e, losses)))
        }
        EnhanceMode::Global | EnhanceMode::Auto => {
            let role = Role::GlobalEnhancer;
            let mut e = shapes.build(role, init_seed(cfg.seed, role))?;
            let mut rng = phase_rng(cfg.seed, role);
            let (train, _) = sample_split(data);
            let losses = enhance::train_global_enhancer(&mut e, cfg.loss.sigma, data, &train, sched, &mut rng)?;
            Ok(Some((role, e, losses)))
        }
    }
}

/// Transfers the held-out inputs and scores them.
pub fn evaluate(
    cfg: &TrainConfig,
    t: &Network32,
    enhancer: Option<&Network32>,
    pre: &Pretrained,
    heldout: &Data,
) -> Result<(Metrics, diat_core::Tensor32)> {
    let idx: Vec<usize> = (0..heldout.len()).collect();
    let x = heldout.images(&idx)?;
    let mode = if enhancer.is_some() { cfg.enhancement() } else { EnhanceMode::None };
    let y = transfer::run_transfer(t, enhancer, mode, cfg.loss.sigma, &x)?;
    let identities: Vec<usize> = heldout.samples.iter().map(|s| s.identity).collect();
    let attr = cfg.target.attribute;
    let masks = if attr.is_local() { Some(heldout.masks(&idx, attr)?) } else { None };
    let m = pre.evaluator().metrics(&x, &y, &identities, masks.as_ref(), cfg.target, cfg.seed)?;
    Ok((m, y))
}

/// Mean residual-noise metric `||f(T(x)) - T(x)||` over held-out inputs.
pub fn residual_noise(t: &Network32, pre: &Pretrained, heldout: &Data) -> Result<f64> {
    let idx: Vec<usize> = (0..heldout.len()).collect();
    let tx = transfer::transform_only(t, &heldout.images(&idx)?)?;
    eval::residual_noise(&pre.regularizer.f, &tx)
}
