use diat_core::losses::{self, DiatNets};
use diat_core::{Checkpoint, Graph32, Network32, ParamMode, Scale};
use diat_data::{Dataset, GeneratorConfig, Split};
use diat_pipeline::workflow::{self, Pretrained};
use diat_pipeline::{Error, Regularizer, ReportWriter, Role, StopReason, TrainConfig, TrainReport, Variant};

type Data = Dataset<f32>;

fn data() -> Data {
    Dataset::generate(&GeneratorConfig { n: 160, size: 16, ..GeneratorConfig::default() }).unwrap()
}

fn config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant);
    cfg.scale = Scale::new(1, 8).unwrap();
    cfg.batch = 4;
    cfg.monitor_size = 8;
    cfg.score_every = 1;
    cfg.max_iterations = 4;
    cfg.seed = 11;
    cfg
}

/// Untrained networks in every role; enough to exercise the loop.
fn fresh(cfg: &TrainConfig, data: &Data) -> Pretrained {
    let shapes = workflow::shapes(cfg, data).unwrap();
    let b = |role| shapes.build(role, workflow::init_seed(cfg.seed, role)).unwrap();
    Pretrained {
        transform: b(Role::PretrainedTransform),
        discriminator: b(Role::PretrainedDiscriminator),
        embedder: b(Role::Embedder),
        regularizer: Regularizer::trained(b(Role::Reconstruction), b(Role::Denoiser)),
        classifier: b(Role::AttributeClassifier),
        eval_embedder: b(Role::EvalEmbedder),
    }
}

fn same_params(a: &Network32, b: &Network32) -> bool {
    a.params().iter().zip(b.params()).all(|(x, y)| x == y)
}

fn split(cfg: &TrainConfig, data: &Data) -> Split {
    workflow::transform_split(cfg, data)
}

#[test]
fn one_outer_iteration_is_dstep_then_tstep_updates() {
    let d = data();
    for (dstep, tstep) in [(1, 2), (3, 1)] {
        let mut cfg = config(Variant::Diat);
        (cfg.dstep, cfg.tstep) = (dstep, tstep);
        let pre = fresh(&cfg, &d);
        let mut tr = pre.trainer(&cfg, &d, &split(&cfg, &d)).unwrap();
        tr.step().unwrap();
        assert_eq!(tr.update_counts(), (dstep as u64, tstep as u64));
        tr.step().unwrap();
        assert_eq!(tr.update_counts(), (2 * dstep as u64, 2 * tstep as u64));
    }
}

#[test]
fn updates_touch_only_their_own_network() {
    let d = data();
    for v in [Variant::Diat, Variant::DiatA] {
        let mut cfg = config(v);
        cfg.loss.adaptive_in_discriminator = true;
        let pre = fresh(&cfg, &d);
        let mut tr = pre.trainer(&cfg, &d, &split(&cfg, &d)).unwrap();
        let (t0, d0) = (tr.t.clone(), tr.d.clone());
        tr.step_discriminator().unwrap();
        assert!(same_params(&tr.t, &t0), "{v}: D step changed T");
        assert!(!same_params(&tr.d, &d0), "{v}: D step left D unchanged");
        let d1 = tr.d.clone();
        tr.step_transform().unwrap();
        assert!(same_params(&tr.d, &d1), "{v}: T step changed D");
        assert!(!same_params(&tr.t, &t0), "{v}: T step left T unchanged");
    }
}

#[test]
fn discriminator_sees_fakes_from_the_current_transform() {
    let d = data();
    let cfg = config(Variant::Diat);
    let pre = fresh(&cfg, &d);
    let s = split(&cfg, &d);
    let mut a = pre.trainer(&cfg, &d, &s).unwrap();
    let mut b = pre.trainer(&cfg, &d, &s).unwrap();
    a.step().unwrap();
    b.step().unwrap();
    assert!(same_params(&a.d, &b.d));
    // Same RNG, same D; only T differs, so any change in D's next update
    // comes from fakes regenerated with the current T.
    let last = b.t.params().len() - 1;
    b.t.params_mut()[last].data_mut()[0] += 0.5;
    let la = a.step_discriminator().unwrap();
    let lb = b.step_discriminator().unwrap();
    assert_ne!(la, lb);
    assert!(!same_params(&a.d, &b.d));
}

#[test]
fn trainer_objective_matches_the_composed_objectives() {
    let d = data();
    for v in [Variant::Diat, Variant::DiatA, Variant::Diat1, Variant::Diat2] {
        let cfg = config(v);
        let pre = fresh(&cfg, &d);
        let s = split(&cfg, &d);
        let tr = pre.trainer(&cfg, &d, &s).unwrap();
        let mut g = Graph32::new();
        let x = g.constant(d.images(&s.input[..4]).unwrap());
        let a = g.constant(d.images(&s.guided[..4]).unwrap());
        let tp = tr.t.register(&mut g, ParamMode::Trainable);
        let ours = tr.transform_objective(&mut g, x, &tp).unwrap();
        let tx = tr.t.forward_with(&mut g, x, &tp).unwrap().output;
        let dp = tr.d.register(&mut g, ParamMode::Frozen);
        let loss = cfg.loss();
        let (_, reference) = if v.is_adaptive() {
            losses::diat_a_objective(&mut g, &loss, &tr.d, &dp, x, tx, a).unwrap()
        } else {
            let nets = DiatNets { d: &tr.d, d_params: &dp, f: &pre.regularizer.f, phi: &pre.embedder };
            losses::diat_objective(&mut g, &loss, &nets, x, tx, a).unwrap()
        };
        let val = |v| g.value(v).item() as f64;
        assert_eq!(val(ours.total), val(reference.total), "{v}");
        assert_eq!(ours.identity.is_some(), v.has_identity_term(), "{v}");
        assert_eq!(ours.smooth.is_some(), v.has_smooth_term(), "{v}");
    }
}

fn run_rows(cfg: &TrainConfig, d: &Data) -> TrainReport {
    let pre = fresh(cfg, d);
    pre.trainer(cfg, d, &split(cfg, d)).unwrap().run(None, None).unwrap()
}

#[test]
fn identical_runs_produce_identical_reports() {
    let d = data();
    let cfg = config(Variant::DiatA);
    let (a, b) = (run_rows(&cfg, &d), run_rows(&cfg, &d));
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(a.rows.len(), 4);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(Variant::Diat);
    cfg.max_iterations = 6;
    let pre = fresh(&cfg, &d);
    let s = split(&cfg, &d);
    let mut full = pre.trainer(&cfg, &d, &s).unwrap();
    let full_report = full.run(None, None).unwrap();

    let report_path = dir.path().join("report.tsv");
    let mut half_cfg = cfg.clone();
    half_cfg.max_iterations = 3;
    let mut first = pre.trainer(&half_cfg, &d, &s).unwrap();
    let mut w = ReportWriter::create(&report_path).unwrap();
    first.run(Some(&mut w), Some(dir.path())).unwrap();
    // A later row that a crash left behind must be dropped on resume.
    w.append(&full_report.rows[3]).unwrap();
    drop(w);

    let mut second = pre.trainer(&cfg, &d, &s).unwrap();
    let t = Checkpoint::<f32>::load(Role::Transform.path(dir.path())).unwrap();
    let dk = Checkpoint::<f32>::load(Role::Discriminator.path(dir.path())).unwrap();
    second.restore(&t, &dk).unwrap();
    assert_eq!(second.iteration(), 3);
    let mut w = ReportWriter::resume(&report_path, 3).unwrap();
    let rest = second.run(Some(&mut w), None).unwrap();
    drop(w);

    assert_eq!(rest.rows, full_report.rows[3..]);
    assert!(same_params(&second.t, &full.t));
    assert!(same_params(&second.d, &full.d));
    assert_eq!(second.update_counts(), full.update_counts());
    let written = TrainReport::parse_rows(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(written, full_report.rows);
}

#[test]
fn restore_rejects_a_checkpoint_of_another_variant() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Variant::Diat);
    let pre = fresh(&cfg, &d);
    let s = split(&cfg, &d);
    pre.trainer(&cfg, &d, &s).unwrap().save(dir.path()).unwrap();
    let t = Checkpoint::<f32>::load(Role::Transform.path(dir.path())).unwrap();
    let dk = Checkpoint::<f32>::load(Role::Discriminator.path(dir.path())).unwrap();
    let other = config(Variant::Diat3);
    let mut tr = pre.trainer(&other, &d, &s).unwrap();
    assert!(matches!(tr.restore(&t, &dk), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Variant::Diat);
    let pre = fresh(&cfg, &d);
    let mut tr = pre.trainer(&cfg, &d, &split(&cfg, &d)).unwrap();
    tr.step().unwrap();
    let saved = tr.save(dir.path()).unwrap();
    let bytes = std::fs::read(&saved).unwrap();
    for p in tr.t.params_mut() {
        p.data_mut().fill(f32::NAN);
    }
    match tr.run(None, Some(dir.path())) {
        Err(Error::Divergence { iteration, last_checkpoint, .. }) => {
            assert_eq!(iteration, 2);
            assert_eq!(last_checkpoint.as_deref(), Some(saved.as_path()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(std::fs::read(&saved).unwrap(), bytes);
}

#[test]
fn plateau_stops_only_after_the_threshold() {
    let d = data();
    let mut cfg = config(Variant::Diat1);
    cfg.max_iterations = 50;
    cfg.success_threshold = 0.0;
    cfg.plateau_window = 3;
    cfg.plateau_min_delta = 2.0;
    let r = run_rows(&cfg, &d);
    assert_eq!(r.stop, StopReason::Plateau);
    assert_eq!(r.iterations_to_threshold, Some(1));
    assert_eq!(r.rows.len(), 4);

    cfg.max_iterations = 3;
    let r = run_rows(&cfg, &d);
    assert_eq!(r.stop, StopReason::MaxIterations);
    assert_eq!(r.rows.len(), 3);
}

#[test]
fn rows_between_scores_carry_the_last_measurement() {
    let d = data();
    let mut cfg = config(Variant::Diat2);
    cfg.score_every = 3;
    cfg.max_iterations = 5;
    let r = run_rows(&cfg, &d);
    let s: Vec<f64> = r.rows.iter().map(|r| r.identity_distance).collect();
    assert_eq!(s[1], s[0]);
    assert_eq!(s[4], s[2]);
    assert!(r.rows.iter().all(|r| r.identity.is_some() && r.smooth.is_none()));
}

#[test]
fn missing_prerequisites_are_reported() {
    let d = data();
    let cfg = config(Variant::Diat);
    let pre = fresh(&cfg, &d);
    let mut aux = pre.auxiliary();
    aux.denoiser = None;
    let s = split(&cfg, &d);
    let r = diat_pipeline::TransformTrainer::new(&cfg, pre.transform.clone(), pre.discriminator.clone(), aux, &d, &s);
    assert!(matches!(r, Err(Error::MissingPrerequisite(_))));
    let empty = Split { guided: vec![], input: s.input.clone(), warnings: vec![] };
    assert!(matches!(pre.trainer(&cfg, &d, &empty), Err(Error::Config(_))));
}
