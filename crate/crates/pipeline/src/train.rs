//! Alternating adversarial training of the transform network.
//!
//! Each outer iteration performs `dstep` discriminator updates, each on a
//! guided batch against fakes freshly generated by the current transform
//! network, then `tstep` transform updates on the variant's objective.
//! The attribute score is measured every `score_every` iterations on a
//! fixed monitor set with the evaluation classifier, never with D.

use std::path::{Path, PathBuf};
use std::time::Instant;

use diat_core::losses::{self, LossConfig};
use diat_core::{Adam32, AdamConfig, Checkpoint, Graph32, Network32, ParamMode, Tensor32, Var};
use diat_data::{Dataset, Split};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::sample_from;
use crate::config::TrainConfig;
use crate::error::{config_err, Error, Result};
use crate::eval;
use crate::nets::Role;
use crate::report::{ReportRow, ReportWriter, StopReason, TrainReport};

type Data = Dataset<f32>;

/// Frozen networks the objective and the monitor depend on.
#[derive(Clone, Copy)]
pub struct Auxiliary<'a> {
    /// Identity embedder for the non-adaptive identity loss.
    pub embedder: Option<&'a Network32>,
    /// Denoiser for the smoothness term.
    pub denoiser: Option<&'a Network32>,
    pub classifier: &'a Network32,
    pub eval_embedder: &'a Network32,
}

/// Values of one transform update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransformStep {
    pub adversarial: f64,
    pub identity: Option<f64>,
    pub smooth: Option<f64>,
    pub total: f64,
}

/// Stop-rule state: the plateau clock restarts whenever the score beats
/// the last recorded best by at least the minimum delta.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Plateau {
    best: f64,
    since: u64,
    reached: Option<u64>,
}

pub struct TransformTrainer<'a> {
    cfg: TrainConfig,
    loss: LossConfig,
    data: &'a Data,
    input: Vec<usize>,
    guided: Vec<usize>,
    monitor: Tensor32,
    pub t: Network32,
    pub d: Network32,
    adam_t: Adam32,
    adam_d: Adam32,
    aux: Auxiliary<'a>,
    rng: ChaCha8Rng,
    iteration: u64,
    d_updates: u64,
    t_updates: u64,
    score: f64,
    identity_distance: f64,
    plateau: Plateau,
    last_saved: Option<PathBuf>,
}

fn finite(v: f64, what: &str, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { what: what.into(), iteration, last_checkpoint: None })
    }
}

/// Non-finite gradients surface from the optimizer rather than the loss.
fn diverged(e: diat_core::Error, what: &str, iteration: u64) -> Error {
    match e {
        diat_core::Error::NonFinite { op } => {
            Error::Divergence { what: format!("{what} ({op})"), iteration, last_checkpoint: None }
        }
        e => e.into(),
    }
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).or_else(|_| config_err(format!("bad float field {s:?}")))
}

impl<'a> TransformTrainer<'a> {
    /// `t` and `d` are the pretrained networks; `split` supplies the input
    /// and guided sets.
    pub fn new(
        cfg: &TrainConfig,
        t: Network32,
        d: Network32,
        aux: Auxiliary<'a>,
        data: &'a Data,
        split: &Split,
    ) -> Result<Self> {
        cfg.validate()?;
        let loss = cfg.loss();
        if split.input.is_empty() || split.guided.is_empty() {
            return config_err(format!(
                "transform training needs non-empty sets, got {} inputs and {} guided",
                split.input.len(),
                split.guided.len()
            ));
        }
        if loss.lambda > 0.0 && !cfg.variant.is_adaptive() && aux.embedder.is_none() {
            return Err(Error::MissingPrerequisite(format!("{} needs the identity embedder", cfg.variant)));
        }
        if loss.gamma > 0.0 && aux.denoiser.is_none() {
            return Err(Error::MissingPrerequisite(format!("{} needs the trained denoiser", cfg.variant)));
        }
        let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6e69_746f_72);
        let m = cfg.monitor_size.min(split.input.len());
        let mut chosen: Vec<usize> = sample_indices(&mut pick, split.input.len(), m).into_iter().map(|k| split.input[k]).collect();
        chosen.sort_unstable();
        let monitor = data.images(&chosen)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam_t: Adam32::new(AdamConfig::with_lr(cfg.lr_transform()), t.params()),
            adam_d: Adam32::new(AdamConfig::with_lr(cfg.lr_discriminator()), d.params()),
            cfg: cfg.clone(),
            loss,
            data,
            input: split.input.clone(),
            guided: split.guided.clone(),
            monitor,
            t,
            d,
            aux,
            rng,
            iteration: 0,
            d_updates: 0,
            t_updates: 0,
            score: 0.0,
            identity_distance: 0.0,
            plateau: Plateau { best: f64::NEG_INFINITY, since: 0, reached: None },
            last_saved: None,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Discriminator and transform updates performed so far.
    pub fn update_counts(&self) -> (u64, u64) {
        (self.d_updates, self.t_updates)
    }

    pub fn iterations_to_threshold(&self) -> Option<u64> {
        self.plateau.reached
    }

    /// One discriminator update on a guided batch and fresh fakes from the
    /// current transform network. Returns loss_D.
    pub fn step_discriminator(&mut self) -> Result<f64> {
        let xi = sample_from(&self.input, self.cfg.batch, &mut self.rng);
        let ai = sample_from(&self.guided, self.cfg.batch, &mut self.rng);
        let x = self.data.images(&xi)?;
        let fake = self.t.infer(&x)?;
        let mut g = Graph32::new();
        let (xv, av, fv) = (g.constant(x), g.constant(self.data.images(&ai)?), g.constant(fake));
        let p = self.d.register(&mut g, ParamMode::Trainable);
        let real = self.d.forward_with(&mut g, av, &p)?.output;
        let fake = self.d.forward_with(&mut g, fv, &p)?.output;
        let mut loss = losses::discriminator_adversarial_loss(&mut g, real, fake)?;
        if self.cfg.variant.is_adaptive() && self.loss.adaptive_in_discriminator && self.loss.lambda > 0.0 {
            let id = losses::adaptive_identity_loss(&mut g, &self.d, &p, fv, xv, self.loss.identity_weights)?;
            let w = g.mul_scalar(id, self.loss.lambda)?;
            loss = g.add(loss, w)?;
        }
        let v = finite(g.value(loss).item() as f64, "discriminator loss", self.iteration)?;
        g.backward(loss)?;
        let grads = self.d.grads(&g, &p);
        let it = self.iteration;
        self.adam_d.step(self.d.params_mut(), &grads).map_err(|e| diverged(e, "discriminator update", it))?;
        self.d_updates += 1;
        Ok(v)
    }

    /// Builds the variant's transform objective on `x` with D frozen.
    pub fn transform_objective(
        &self,
        g: &mut Graph32,
        x: Var,
        t_params: &[Var],
    ) -> Result<losses::TransformTerms> {
        let tx = self.t.forward_with(g, x, t_params)?.output;
        let dp = self.d.register(g, ParamMode::Frozen);
        let fake = self.d.forward_with(g, tx, &dp)?.output;
        let adv = losses::generator_adversarial_loss(g, fake, self.loss.generator_loss)?;
        let identity = match (self.loss.lambda > 0.0, self.cfg.variant.is_adaptive()) {
            (false, _) => None,
            (true, true) => Some(losses::adaptive_identity_loss(g, &self.d, &dp, tx, x, self.loss.identity_weights)?),
            (true, false) => {
                let phi = self.aux.embedder.expect("checked in new");
                Some(losses::identity_loss(g, phi, tx, x, self.loss.identity_weights)?)
            }
        };
        let smooth = match self.loss.gamma > 0.0 {
            true => {
                let f = self.aux.denoiser.expect("checked in new");
                let fp = f.register(g, ParamMode::Frozen);
                let ftx = f.forward_with(g, tx, &fp)?.output;
                Some(losses::smooth_regularizer(g, ftx, tx)?)
            }
            false => None,
        };
        Ok(losses::combine_transform_terms(g, &self.loss, adv, identity, smooth)?)
    }

    /// One transform update with D frozen.
    pub fn step_transform(&mut self) -> Result<TransformStep> {
        let xi = sample_from(&self.input, self.cfg.batch, &mut self.rng);
        let mut g = Graph32::new();
        let x = g.constant(self.data.images(&xi)?);
        let p = self.t.register(&mut g, ParamMode::Trainable);
        let terms = self.transform_objective(&mut g, x, &p)?;
        let val = |v: Var| g.value(v).item() as f64;
        let step = TransformStep {
            adversarial: val(terms.adversarial),
            identity: terms.identity.map(val),
            smooth: terms.smooth.map(val),
            total: finite(val(terms.total), "transform loss", self.iteration)?,
        };
        g.backward(terms.total)?;
        let grads = self.t.grads(&g, &p);
        let it = self.iteration;
        self.adam_t.step(self.t.params_mut(), &grads).map_err(|e| diverged(e, "transform update", it))?;
        self.t_updates += 1;
        Ok(step)
    }

    /// Attribute score and matched identity distance on the monitor set.
    pub fn measure(&self) -> Result<(f64, f64)> {
        let out = crate::transfer::transform_only(&self.t, &self.monitor)?;
        let score = eval::attribute_success(self.aux.classifier, &out, self.cfg.target)?;
        let dist = eval::matched_distance(self.aux.eval_embedder, &self.monitor, &out)?;
        Ok((score, dist))
    }

    /// Runs one outer iteration and returns its report row.
    pub fn step(&mut self) -> Result<ReportRow> {
        self.iteration += 1;
        let mut loss_d = 0.0;
        for _ in 0..self.cfg.dstep {
            loss_d += self.step_discriminator()?;
        }
        let mut acc = TransformStep::default();
        for _ in 0..self.cfg.tstep {
            let s = self.step_transform()?;
            acc.adversarial += s.adversarial;
            acc.identity = s.identity.map(|v| v + acc.identity.unwrap_or(0.0));
            acc.smooth = s.smooth.map(|v| v + acc.smooth.unwrap_or(0.0));
            acc.total += s.total;
        }
        if self.iteration == 1 || self.iteration % self.cfg.score_every == 0 {
            (self.score, self.identity_distance) = self.measure()?;
            self.update_plateau();
        }
        let (nd, nt) = (self.cfg.dstep as f64, self.cfg.tstep as f64);
        Ok(ReportRow {
            iteration: self.iteration,
            loss_d: loss_d / nd,
            adversarial: acc.adversarial / nt,
            identity: acc.identity.map(|v| v / nt),
            smooth: acc.smooth.map(|v| v / nt),
            total: acc.total / nt,
            attribute_score: self.score,
            identity_distance: self.identity_distance,
        })
    }

    fn update_plateau(&mut self) {
        let p = &mut self.plateau;
        if self.score >= p.best + self.cfg.plateau_min_delta {
            p.best = self.score;
            p.since = self.iteration;
        }
        if p.reached.is_none() && self.score >= self.cfg.success_threshold {
            p.reached = Some(self.iteration);
        }
    }

    /// The plateau rule applies only once the success threshold was met.
    pub fn stop_reason(&self) -> Option<StopReason> {
        if self.iteration >= self.cfg.max_iterations {
            return Some(StopReason::MaxIterations);
        }
        let p = &self.plateau;
        if p.reached.is_some() && self.iteration - p.since >= self.cfg.plateau_window {
            return Some(StopReason::Plateau);
        }
        None
    }

    /// Transform and discriminator checkpoints with optimizer, RNG and
    /// loop state.
    pub fn checkpoints(&self) -> (Checkpoint<f32>, Checkpoint<f32>) {
        let p = &self.plateau;
        let t = Checkpoint::of(&self.t, self.iteration)
            .with_optimizer(&self.adam_t)
            .with_rng(&self.rng)
            .with_meta("variant", self.cfg.variant)
            .with_meta("d_updates", self.d_updates)
            .with_meta("t_updates", self.t_updates)
            .with_meta("score", hex(self.score))
            .with_meta("identity_distance", hex(self.identity_distance))
            .with_meta("plateau_best", hex(p.best))
            .with_meta("plateau_since", p.since)
            .with_meta("reached", p.reached.map_or_else(|| "-".into(), |v| v.to_string()));
        let d = Checkpoint::of(&self.d, self.iteration).with_optimizer(&self.adam_d);
        (t, d)
    }

    pub fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        let (t, d) = self.checkpoints();
        d.save(Role::Discriminator.path(dir))?;
        let path = Role::Transform.path(dir);
        t.save(&path)?;
        self.last_saved = Some(path.clone());
        Ok(path)
    }

    /// Restores the state saved by [`Self::checkpoints`].
    pub fn restore(&mut self, t: &Checkpoint<f32>, d: &Checkpoint<f32>) -> Result<()> {
        let meta = |k: &str| t.meta.get(k).ok_or_else(|| Error::Config(format!("checkpoint lacks {k:?}")));
        let int = |k: &str| -> Result<u64> { meta(k)?.parse().or_else(|_| config_err(format!("bad {k:?}"))) };
        if meta("variant")? != self.cfg.variant.name() {
            return config_err(format!("checkpoint was trained as {}, config says {}", meta("variant")?, self.cfg.variant));
        }
        if t.step != d.step {
            return config_err(format!("transform at {} but discriminator at {}", t.step, d.step));
        }
        let (Some(at), Some(ad), Some(rng)) = (&t.optimizer, &d.optimizer, &t.rng) else {
            return config_err("checkpoint lacks optimizer or RNG state");
        };
        t.restore_into(&mut self.t)?;
        d.restore_into(&mut self.d)?;
        self.adam_t = at.clone();
        self.adam_d = ad.clone();
        self.rng = rng.restore();
        self.iteration = t.step;
        self.d_updates = int("d_updates")?;
        self.t_updates = int("t_updates")?;
        self.score = unhex(meta("score")?)?;
        self.identity_distance = unhex(meta("identity_distance")?)?;
        let reached = match meta("reached")?.as_str() {
            "-" => None,
            s => Some(s.parse().or_else(|_| config_err("bad reached"))?),
        };
        self.plateau = Plateau { best: unhex(meta("plateau_best")?)?, since: int("plateau_since")?, reached };
        Ok(())
    }

    /// Runs until a stop rule fires. Rows go to `writer` when given;
    /// checkpoints go to `checkpoint_dir` every `checkpoint_every`
    /// iterations and at the end. On divergence nothing is saved and the
    /// error names the last checkpoint this trainer wrote.
    pub fn run(&mut self, mut writer: Option<&mut ReportWriter>, checkpoint_dir: Option<&Path>) -> Result<TrainReport> {
        let start = Instant::now();
        let mut rows = Vec::new();
        let stop = loop {
            if let Some(r) = self.stop_reason() {
                break r;
            }
            let row = match self.step() {
                Ok(row) => row,
                Err(Error::Divergence { what, iteration, .. }) => {
                    return Err(Error::Divergence { what, iteration, last_checkpoint: self.last_saved.clone() });
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = writer.as_deref_mut() {
                w.append(&row)?;
            }
            rows.push(row);
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    self.save(dir)?;
                }
            }
        };
        if let Some(dir) = checkpoint_dir {
            self.save(dir)?;
        }
        Ok(TrainReport {
            rows,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            iterations_to_threshold: self.plateau.reached,
            stop,
        })
    }
}
