//! One function per subcommand. Each takes the resolved configuration,
//! locks its output directories, writes an effective-config snapshot next
//! to its outputs, and leaves every file a pure function of config and
//! seed except the wall-clock summaries.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diat_core::selfcheck::{self, CaseResult};
use diat_core::{Network32, Tensor32};
use diat_data::dataset::MANIFEST_FILE;
use diat_data::{generate_dataset, ppm, Dataset};
use diat_pipeline::workflow::{self, Pretrained};
use diat_pipeline::{report, EnhanceMode, Metrics, Role, Shapes, TrainReport};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::{CliError, Kind};

/// Rows of the evaluation mosaic.
const MOSAIC_ROWS: usize = 8;
pub const LOCK_FILE: &str = ".diat.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Creates `dir` if needed and claims it; fails if another run holds it.
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::new(
                    Kind::Io,
                    format!("{} is locked by another run; remove {} if that run is gone", dir.display(), path.display()),
                )
            } else {
                CliError::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Locks each distinct directory once.
fn lock_all(dirs: &[&Path]) -> Result<Vec<DirLock>, CliError> {
    let mut locks: Vec<DirLock> = Vec::new();
    let mut seen: Vec<PathBuf> = Vec::new();
    for d in dirs {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        let canon = d.canonicalize().map_err(|e| CliError::io(d, e))?;
        if !seen.contains(&canon) {
            locks.push(DirLock::acquire(d)?);
            seen.push(canon);
        }
    }
    Ok(locks)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn snapshot(cfg: &RunConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    write(&dir.join(format!("{command}.conf")), &cfg.serialize())
}

fn shapes(cfg: &RunConfig) -> Result<Shapes, CliError> {
    let t = &cfg.train;
    Ok(Shapes {
        scale: t.scale,
        resolution: t.resolution()?,
        n_identities: cfg.identities,
        denoiser_width: t.denoiser_width,
        enhancer_width: t.enhancer_width,
    })
}

/// The dataset under `data_root`, which must match the dataset settings.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset<f32>, CliError> {
    if !cfg.data_root.join(MANIFEST_FILE).exists() {
        return Err(CliError::new(
            Kind::MissingPrerequisite,
            format!("no dataset at {}; run the gen-data phase first", cfg.data_root.display()),
        ));
    }
    let data = Dataset::<f32>::load(&cfg.data_root)?;
    if data.config != cfg.generator()? {
        return Err(CliError::config(format!(
            "dataset at {} was generated with other settings; rerun gen-data",
            cfg.data_root.display()
        )));
    }
    Ok(data)
}

fn enhancer_role(mode: EnhanceMode) -> Option<Role> {
    match mode {
        EnhanceMode::Local => Some(Role::LocalEnhancer),
        EnhanceMode::Global => Some(Role::GlobalEnhancer),
        EnhanceMode::None | EnhanceMode::Auto => None,
    }
}

/// The trained transform, which must come from the configured variant.
fn load_transform(cfg: &RunConfig, shapes: &Shapes) -> Result<Network32, CliError> {
    let (t, ckpt) = shapes.load(Role::Transform, &cfg.checkpoint_dir)?;
    let variant = ckpt.meta.get("variant").map(String::as_str).unwrap_or("?");
    if variant != cfg.train.variant.name() {
        return Err(CliError::config(format!(
            "transform checkpoint was trained as {variant}, config says {}; rerun train",
            cfg.train.variant
        )));
    }
    Ok(t)
}

/// The trained transform and, if the variant has one, its enhancer.
fn load_transfer_nets(cfg: &RunConfig) -> Result<(Network32, Option<Network32>), CliError> {
    let shapes = shapes(cfg)?;
    let t = load_transform(cfg, &shapes)?;
    let e = match enhancer_role(cfg.train.enhancement()) {
        Some(role) => Some(shapes.load(role, &cfg.checkpoint_dir)?.0),
        None => None,
    };
    Ok((t, e))
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let _lock = lock_all(&[&cfg.data_root])?;
    let gen = cfg.generator()?;
    let manifest = generate_dataset(&gen, &cfg.data_root)?;
    snapshot(cfg, &cfg.data_root, "gen-data")?;
    info!("wrote {} images of {}x{} to {}", manifest.entries.len(), gen.size, gen.size, cfg.data_root.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let _lock = lock_all(&[&cfg.checkpoint_dir, &cfg.report_dir])?;
    let start = Instant::now();
    let (nets, summary) = workflow::pretrain(&cfg.train, &data)?;
    nets.save(&cfg.checkpoint_dir, &cfg.train)?;
    write(&cfg.report_dir.join("pretrain.tsv"), &summary.to_tsv())?;
    snapshot(cfg, &cfg.report_dir, "pretrain")?;
    info!(
        "pretrained in {:.1}s: transform mse {:.4}, discriminator accuracy {:.3}",
        start.elapsed().as_secs_f64(),
        summary.transform.heldout,
        summary.discriminator.heldout
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let shapes = shapes(cfg)?;
    let pre = Pretrained::load(&shapes, &cfg.checkpoint_dir)?;
    let _lock = lock_all(&[&cfg.checkpoint_dir, &cfg.report_dir])?;
    let split = workflow::transform_split(&cfg.train, &data);
    for w in &split.warnings {
        warn!("{w}");
    }
    let mut trainer = pre.trainer(&cfg.train, &data, &split)?;
    let report_path = cfg.report_dir.join("train.tsv");
    let mut writer = if resume {
        let (_, t) = shapes.load(Role::Transform, &cfg.checkpoint_dir)?;
        let (_, d) = shapes.load(Role::Discriminator, &cfg.checkpoint_dir)?;
        trainer.restore(&t, &d)?;
        info!("resuming {} at iteration {}", cfg.train.variant, trainer.iteration());
        report::ReportWriter::resume(&report_path, trainer.iteration())?
    } else {
        report::ReportWriter::create(&report_path)?
    };
    snapshot(cfg, &cfg.report_dir, "train")?;
    let mut report = trainer.run(Some(&mut writer), Some(&cfg.checkpoint_dir))?;
    drop(writer);
    if resume {
        let text = fs::read_to_string(&report_path).map_err(|e| CliError::io(&report_path, e))?;
        report.rows = TrainReport::parse_rows(&text)?;
    }
    write(&cfg.report_dir.join("train_summary.tsv"), &report.summary_tsv())?;
    let last = report.rows.last();
    info!(
        "{} stopped ({}) at iteration {}: attribute score {:.3}",
        cfg.train.variant,
        report.stop,
        trainer.iteration(),
        last.map_or(f64::NAN, |r| r.attribute_score)
    );
    Ok(report)
}

pub fn enhance_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    if cfg.train.enhancement() == EnhanceMode::None {
        info!("{} has no enhancement stage; nothing to train", cfg.train.variant);
        return Ok(());
    }
    let data = load_dataset(cfg)?;
    let shapes = shapes(cfg)?;
    let pre = Pretrained::load(&shapes, &cfg.checkpoint_dir)?;
    let t = load_transform(cfg, &shapes)?;
    let _lock = lock_all(&[&cfg.checkpoint_dir, &cfg.report_dir])?;
    let Some((role, e, losses)) = workflow::train_enhancer(&cfg.train, &data, &t, &pre)? else {
        return Ok(());
    };
    diat_pipeline::nets::save(&e, role, &cfg.checkpoint_dir, cfg.train.enhancer_steps)?;
    let mut tsv = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(tsv, "{}\t{l}", i + 1);
    }
    write(&cfg.report_dir.join("enhance.tsv"), &tsv)?;
    snapshot(cfg, &cfg.report_dir, "enhance-train")?;
    info!("trained {} for {} steps, final loss {:.4}", role.name(), losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

/// Transfers every image in `inputs` into `out`, keeping file names.
/// Returns the inference time per image in milliseconds.
pub fn transfer(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<f64, CliError> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(CliError::config("transfer needs at least one input image"));
    }
    let (t, e) = load_transfer_nets(cfg)?;
    let size = cfg.train.resolution()?;
    let images = inputs
        .iter()
        .map(|p| ppm::read_image::<f32>(p, Some(size)))
        .collect::<Result<Vec<_>, _>>()?;
    let _lock = lock_all(&[out])?;
    let x = Tensor32::stack(&images)?;
    let start = Instant::now();
    let mode = if e.is_some() { cfg.train.enhancement() } else { EnhanceMode::None };
    let y = diat_pipeline::run_transfer(&t, e.as_ref(), mode, cfg.train.loss.sigma, &x)?;
    let ms = start.elapsed().as_secs_f64() * 1e3 / inputs.len() as f64;
    for (src, img) in inputs.iter().zip(y.unstack()?) {
        let name = src.file_name().ok_or_else(|| CliError::config(format!("{} has no file name", src.display())))?;
        ppm::write_image(&out.join(name), &img)?;
    }
    snapshot(cfg, out, "transfer")?;
    info!("transferred {} images ({mode} enhancement) at {ms:.2} ms/image", inputs.len());
    Ok(ms)
}

/// Scores held-out transfers; the metrics are also written to `eval.tsv`.
pub fn eval(cfg: &RunConfig) -> Result<Metrics, CliError> {
    cfg.validate()?;
    let shapes = shapes(cfg)?;
    let pre = Pretrained::load(&shapes, &cfg.checkpoint_dir)?;
    let (t, e) = load_transfer_nets(cfg)?;
    let _lock = lock_all(&[&cfg.report_dir])?;
    let heldout = workflow::heldout_inputs(&cfg.generator()?, cfg.train.target, cfg.eval_count)?;
    let (m, y) = workflow::evaluate(&cfg.train, &t, e.as_ref(), &pre, &heldout)?;
    let noise = workflow::residual_noise(&t, &pre, &heldout)?;

    let mut tsv = String::from("metric\tvalue\n");
    let outside = m.outside_mask_change.map_or_else(|| "-".into(), |v| v.to_string());
    for (k, v) in [
        ("n", m.n.to_string()),
        ("attribute_success", m.attribute_success.to_string()),
        ("identity_distance", m.identity_distance.to_string()),
        ("random_pair_distance", m.random_pair_distance.to_string()),
        ("identity_ratio", (m.identity_distance / m.random_pair_distance).to_string()),
        ("outside_mask_change", outside),
        ("residual_noise", noise.to_string()),
    ] {
        let _ = writeln!(tsv, "{k}\t{v}");
    }
    write(&cfg.report_dir.join("eval.tsv"), &tsv)?;

    let rows: Vec<usize> = (0..heldout.len().min(MOSAIC_ROWS)).collect();
    let x = heldout.images(&rows)?;
    let tx = diat_pipeline::transfer::transform_only(&t, &x)?;
    let enhanced = Tensor32::stack(&rows.iter().map(|&i| y.slice_first(i)).collect::<Result<Vec<_>, _>>()?)?;
    let mut columns = vec![&x, &tx];
    if e.is_some() {
        columns.push(&enhanced);
    }
    report::write_mosaic(&cfg.report_dir.join("eval_mosaic.ppm"), &columns)?;
    snapshot(cfg, &cfg.report_dir, "eval")?;
    info!(
        "{}: attribute success {:.3}, identity distance {:.3} vs random pairs {:.3}",
        cfg.train.variant, m.attribute_success, m.identity_distance, m.random_pair_distance
    );
    Ok(m)
}

/// Central-difference check of every op and loss in double precision.
pub fn gradcheck(instances: usize, seed: u64) -> Result<Vec<CaseResult>, CliError> {
    let mut cases = selfcheck::op_cases();
    cases.extend(selfcheck::loss_cases());
    let results = selfcheck::run_cases(&cases, instances, seed, selfcheck::DEFAULT_EPS, None)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed(selfcheck::DEFAULT_TOLERANCE)).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(CliError::new(
            Kind::Check,
            format!("relative error above {:e} in: {}", selfcheck::DEFAULT_TOLERANCE, failed.join(", ")),
        ));
    }
    Ok(results)
}
