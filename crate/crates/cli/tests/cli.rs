use std::path::Path;
use std::process::{Command, Output};

use diat_cli::RunConfig;
use diat_pipeline::Variant;
use proptest::prelude::*;

const TINY: &str = "\
scale = 1/8
samples = 120
identities = 12
batch = 4
max_iterations = 4
pretrain_transform_steps = 3
pretrain_discriminator_steps = 3
embedder_steps = 3
classifier_steps = 3
reconstruction_steps = 2
denoiser_steps = 2
enhancer_steps = 2
monitor_size = 4
score_every = 2
eval_count = 6
";

fn diat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diat"))
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .env_remove("DIAT_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    dir
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

#[test]
fn config_command_output_parses_back() {
    let dir = workspace();
    let out = diat(dir.path(), &["-c", "tiny.conf", "-s", "lambda=0.3", "config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.train.loss.lambda, 0.3);
    assert_eq!(cfg.samples, 120);
    assert_eq!(cfg.serialize(), text);
}

#[test]
fn overrides_beat_the_file() {
    let dir = workspace();
    let out = diat(dir.path(), &["-c", "tiny.conf", "-s", "samples=7", "-s", "samples=9", "config"]);
    let cfg = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.samples, 9);
}

#[test]
fn config_errors_exit_2_with_one_line() {
    let dir = workspace();
    std::fs::write(dir.path().join("bad.conf"), "seed = 1\nwarp_factor = 9\n").unwrap();
    for args in [
        &["-c", "bad.conf", "config"][..],
        &["-s", "lambda=-1", "config"],
        &["-s", "variant=DIAT9", "config"],
        &["-s", "noequals", "config"],
    ] {
        let out = diat(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let line = stderr_line(&out);
        assert!(line.starts_with("error kind=config code=2 message="), "{line}");
        assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
    }
    let line = stderr_line(&diat(dir.path(), &["-c", "bad.conf", "config"]));
    assert!(line.contains("line 2") && line.contains("warp_factor"), "{line}");
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = workspace();
    let out = diat(dir.path(), &["-c", "nope.conf", "config"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn dependent_commands_name_the_missing_phase() {
    let dir = workspace();
    let cases = [("pretrain", "gen-data"), ("train", "gen-data"), ("eval", "pretrain")];
    for (cmd, phase) in cases {
        let out = diat(dir.path(), &["-c", "tiny.conf", cmd]);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        let line = stderr_line(&out);
        assert!(line.contains(&format!("run the {phase} phase")), "{cmd}: {line}");
    }
}

#[test]
fn full_command_chain() {
    let dir = workspace();
    let p = dir.path();
    let run = |args: &[&str]| {
        let mut full = vec!["-c", "tiny.conf"];
        full.extend_from_slice(args);
        let out = diat(p, &full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["gen-data"]);
    let manifest = std::fs::read(p.join("data/manifest.tsv")).unwrap();
    run(&["gen-data"]);
    assert_eq!(std::fs::read(p.join("data/manifest.tsv")).unwrap(), manifest, "gen-data is idempotent");

    // enhancer before training names the train phase
    let out = diat(p, &["-c", "tiny.conf", "pretrain"]);
    assert!(out.status.success());
    let out = diat(p, &["-c", "tiny.conf", "enhance-train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).contains("run the train phase"));

    run(&["train"]);
    run(&["enhance-train"]);
    let out = run(&["eval"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("attribute_success"));
    for f in ["eval.tsv", "eval_mosaic.ppm", "train.tsv", "train.conf", "eval.conf", "pretrain.tsv"] {
        assert!(p.join("reports").join(f).exists(), "{f}");
    }
    let snapshot = std::fs::read_to_string(p.join("reports/train.conf")).unwrap();
    assert_eq!(RunConfig::parse(&snapshot).unwrap().samples, 120);
    assert!(!p.join("reports").join(diat_cli::commands::LOCK_FILE).exists());

    // a mode-none variant still emits images for attribute-true inputs
    run(&["-s", "variant=DIAT1", "train"]);
    let out = run(&["-s", "variant=DIAT1", "transfer", "--out", "out", "data/images/000000.ppm", "data/images/000001.ppm"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("ms/image"));
    assert!(p.join("out/000000.ppm").exists() && p.join("out/000001.ppm").exists());

    // a transform trained as another variant is refused
    let out = diat(p, &["-c", "tiny.conf", "eval"]);
    assert_eq!(out.status.code(), Some(2));

    // wrong-size inputs are rejected
    std::fs::write(p.join("tiny.ppm"), b"P6\n2 2\n255\n............").unwrap();
    let out = diat(p, &["-c", "tiny.conf", "-s", "variant=DIAT1", "transfer", "--out", "out", "tiny.ppm"]);
    assert_eq!(out.status.code(), Some(5));

    // a held lock blocks a second writer
    std::fs::write(p.join("reports").join(diat_cli::commands::LOCK_FILE), "1").unwrap();
    let out = diat(p, &["-c", "tiny.conf", "-s", "variant=DIAT1", "eval"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr_line(&out).contains("locked"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = workspace();
    std::fs::write(dir.path().join("file"), "").unwrap();
    let out = diat(dir.path(), &["-c", "tiny.conf", "-s", "data_root=file/data", "gen-data"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn gradcheck_passes() {
    let dir = workspace();
    let out = diat(dir.path(), &["gradcheck", "--instances", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("checks passed"));
}

#[test]
fn help_documents_every_command() {
    let out = diat(Path::new("."), &["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen-data", "pretrain", "train", "enhance-train", "transfer", "eval", "gradcheck", "config"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    assert!(text.contains("DIAT_THREADS"));
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![0.0..10.0f64, 1e-9..1e-3f64, Just(0.0), Just(1.0)]
}

prop_compose! {
    fn configs()(
        variant in prop::sample::select(Variant::ALL.to_vec()),
        target in prop::sample::select(vec!["glasses", "no_glasses", "mouth_open", "no_elderly", "male"]),
        seed in any::<u64>(),
        lambda in finite(),
        beta in prop::array::uniform3(finite()),
        marginals in prop::array::uniform4(0.0..=1.0f64),
        lr in prop::option::of(1e-7..1.0f64),
        batch in 2usize..64,
        dir in "[a-z]{1,8}(/[a-z0-9_]{1,8}){0,2}",
        saturating in any::<bool>(),
    ) -> RunConfig {
        let mut c = RunConfig::default();
        c.train.variant = variant;
        c.train.target = target.parse().unwrap();
        c.train.seed = seed;
        c.train.loss.lambda = lambda;
        c.train.loss.beta = beta;
        c.marginals = diat_data::Marginals(marginals);
        c.train.lr_transform = lr;
        c.train.batch = batch;
        c.report_dir = dir.into();
        c.train.loss.generator_loss = if saturating {
            diat_core::losses::GeneratorLoss::Saturating
        } else {
            diat_core::losses::GeneratorLoss::NonSaturating
        };
        c
    }
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(c in configs()) {
        let text = c.serialize();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.serialize(), text);
    }

    #[test]
    fn every_key_reads_back_what_it_wrote(c in configs()) {
        for key in RunConfig::keys() {
            let mut d = RunConfig::default();
            d.set(key, &c.get(key).unwrap()).unwrap();
            prop_assert_eq!(d.get(key).unwrap(), c.get(key).unwrap());
        }
    }
}
