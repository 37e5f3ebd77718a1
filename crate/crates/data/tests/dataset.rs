use std::path::Path;

use diat_core::nn::{Activation, LayerKind, LayerSpec, Network, NetworkSpec, Scale};
use diat_core::{Adam32, AdamConfig, Graph32, ParamMode, Tensor32, Tensor64};
use diat_data::{
    generate_dataset, identity_split, ppm, render, render_sample, split_guided_and_input, Attribute, Attributes,
    Dataset, DatasetManifest, GeneratorConfig, Marginals, Target,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64, n: usize) -> GeneratorConfig {
    GeneratorConfig { seed, n, ..Default::default() }
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(7, 40), a.path()).unwrap();
    generate_dataset(&small(7, 40), b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 1 + 3 * 40);
    assert!(ta == tb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(8, 40), c.path()).unwrap();
    assert!(read_tree(c.path()) != ta);
}

#[test]
fn loaded_dataset_matches_memory_up_to_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(3, 30);
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(DatasetManifest::read(dir.path()).unwrap(), manifest);
    let disk: Dataset<f64> = Dataset::load(dir.path()).unwrap();
    let mem: Dataset<f64> = Dataset::generate(&cfg).unwrap();
    assert_eq!(disk.config, cfg);
    for (d, m) in disk.samples.iter().zip(&mem.samples) {
        assert_eq!((d.index, d.identity, d.attributes), (m.index, m.identity, m.attributes));
        assert_eq!(d.masks, m.masks);
        assert_eq!(d.provenance, m.provenance);
        assert!(d.image.max_abs_diff(&m.image).unwrap() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn load_rejects_missing_and_mismatched_files() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(3, 4), dir.path()).unwrap();
    std::fs::write(dir.path().join("images/000002.ppm"), ppm::encode_image(&Tensor64::zeros(&[3, 16, 16]).unwrap()).unwrap())
        .unwrap();
    assert!(Dataset::<f32>::load(dir.path()).is_err());
    std::fs::remove_file(dir.path().join("images/000002.ppm")).unwrap();
    assert!(Dataset::<f32>::load(dir.path()).is_err());
    assert!(Dataset::<f32>::load(&dir.path().join("nowhere")).is_err());
}

#[test]
fn manifest_text_round_trips_and_rejects_garbage() {
    let cfg = GeneratorConfig { marginals: Marginals([0.25, 0.5, 0.125, 1.0]), ..small(5, 12) };
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    let text = m.to_tsv();
    let back = DatasetManifest::parse(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_tsv(), text);

    let broken = [
        text.replacen("# count\t12", "# count\t13", 1),
        text.replacen("\t1\t", "\t2\t", 1),
        text.replacen("# seed\t5\n", "", 1),
        text.replacen("index\t", "idx\t", 1),
        text.lines().map(|l| l.split('\t').take(5).collect::<Vec<_>>().join("\t")).collect::<Vec<_>>().join("\n"),
    ];
    for b in broken {
        assert!(DatasetManifest::parse(&b).is_err(), "{b}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        GeneratorConfig { size: 48, ..small(0, 4) },
        GeneratorConfig { n: 0, ..small(0, 4) },
        GeneratorConfig { n_identities: 0, ..small(0, 4) },
        GeneratorConfig { marginals: Marginals([1.5, 0.5, 0.5, 0.5]), ..small(0, 4) },
    ] {
        assert!(generate_dataset(&cfg, dir.path()).is_err());
        assert!(Dataset::<f32>::generate(&cfg).is_err());
    }
}

#[test]
fn every_supported_size_renders() {
    for size in diat_data::SUPPORTED_SIZES {
        let s: diat_data::SyntheticFaceSample<f32> = render_sample(&GeneratorConfig { size, ..small(1, 1) }, 0).unwrap();
        assert_eq!(s.image.shape(), &[3, size, size]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for a in Attribute::LOCAL {
            let m = s.mask(a).unwrap();
            assert_eq!(m.shape(), &[1, size, size]);
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(s.mask(Attribute::Male).is_none());
    }
}

#[test]
fn marginals_follow_binomial_bounds() {
    let n = 1000;
    let cfg = GeneratorConfig { n, marginals: Marginals([0.5, 0.2, 0.7, 0.5]), ..small(11, n) };
    let specs: Vec<_> = (0..n).map(|i| cfg.sample_spec(i)).collect();
    for a in Attribute::ALL {
        let p = cfg.marginals.get(a);
        let count = specs.iter().filter(|(_, at, _)| at.get(a)).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - n as f64 * p).abs() <= 5.0 * sd, "{a}: {count}");
    }
    let mut per_id = vec![0usize; cfg.n_identities];
    specs.iter().for_each(|(id, _, _)| per_id[*id] += 1);
    assert!(per_id.iter().all(|&c| c > 0));
    // the rendered labels are the sampled ones
    let d: Dataset<f32> = Dataset::generate(&GeneratorConfig { n: 20, ..cfg.clone() }).unwrap();
    for s in &d.samples {
        assert_eq!(s.attributes, specs[s.index].1);
    }
}

#[test]
fn identity_parameters_are_stable_across_samples() {
    let cfg = small(4, 300);
    let mut seen = std::collections::HashMap::new();
    for i in 0..cfg.n {
        let (id, _, params) = cfg.sample_spec(i);
        let prev = seen.entry(id).or_insert_with(|| params.identity.clone());
        assert_eq!(*prev, params.identity);
    }
    assert_ne!(cfg.identity_params(0), cfg.identity_params(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Flipping one local attribute changes pixels only under its mask, and
    /// the mask itself does not depend on the flip.
    #[test]
    fn local_flips_stay_inside_their_mask(seed in any::<u64>(), index in 0usize..10_000, big in any::<bool>()) {
        let size = if big { 64 } else { 32 };
        let cfg = GeneratorConfig { size, ..small(seed, 1) };
        let (_, attrs, params) = cfg.sample_spec(index);
        let base = render::render(size, &params, &attrs).unwrap();
        for (k, a) in Attribute::LOCAL.into_iter().enumerate() {
            let flipped = render::render(size, &params, &attrs.with(a, !attrs.get(a))).unwrap();
            prop_assert_eq!(&base.masks, &flipped.masks);
            let plane = size * size;
            let mut changed = 0;
            for p in 0..3 * plane {
                if base.image[p] != flipped.image[p] {
                    changed += 1;
                    prop_assert_eq!(base.masks[k][p % plane], 1.0, "{} changed outside its mask", a);
                }
            }
            prop_assert!(changed > 0);
        }
    }

    #[test]
    fn global_flips_change_the_face(seed in any::<u64>()) {
        let cfg = small(seed, 1);
        let (_, attrs, params) = cfg.sample_spec(0);
        let base = render::render(32, &params, &attrs).unwrap();
        for a in [Attribute::Elderly, Attribute::Male] {
            let flipped = render::render(32, &params, &attrs.with(a, !attrs.get(a))).unwrap();
            let changed = base.image.iter().zip(&flipped.image).filter(|(x, y)| x != y).count();
            prop_assert!(changed > 20, "{} changed {} values", a, changed);
        }
    }

    #[test]
    fn random_images_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let t = Tensor64::rand_uniform(&[3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = ppm::encode_image(&t).unwrap();
        let back: Tensor64 = ppm::decode_image(&bytes).unwrap();
        prop_assert!(back.max_abs_diff(&t).unwrap() <= 0.5 / 255.0 + 1e-12);
        for (x, y) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(*y, (x * 255.0).round() / 255.0);
        }
        // decoded values are exact 8-bit levels and re-encode losslessly
        prop_assert_eq!(ppm::encode_image(&back).unwrap(), bytes);
    }

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), n in 1usize..200, limit in 0usize..120, want in any::<bool>()) {
        let cfg = small(seed, n);
        let labels: Vec<Attributes> = (0..n).map(|i| cfg.sample_spec(i).1).collect();
        let target = Target::new(Attribute::Glasses, want);
        let full = split_guided_and_input(&labels, 0..n, target, None, seed);
        prop_assert_eq!(full.guided.len() + full.input.len(), n);
        prop_assert!(full.guided.iter().all(|&i| labels[i].get(Attribute::Glasses) == want));
        prop_assert!(full.input.iter().all(|&i| labels[i].get(Attribute::Glasses) != want));
        let sub = split_guided_and_input(&labels, 0..n, target, Some(limit), seed);
        prop_assert_eq!(&sub, &split_guided_and_input(&labels, 0..n, target, Some(limit), seed));
        prop_assert_eq!(sub.input.len(), limit.min(full.input.len()));
        prop_assert!(sub.input.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sub.input.iter().all(|i| full.input.contains(i)));
        prop_assert_eq!(&sub.guided, &full.guided);
    }
}

#[test]
fn degenerate_split_warns() {
    let labels = vec![Attributes::default().with(Attribute::Glasses, true); 5];
    let s = split_guided_and_input(&labels, 0..5, "glasses".parse().unwrap(), None, 0);
    assert_eq!(s.guided.len(), 5);
    assert!(s.input.is_empty());
    assert_eq!(s.warnings.len(), 1);
    let s = split_guided_and_input(&labels, 0..5, "no_glasses".parse().unwrap(), None, 0);
    assert_eq!((s.guided.len(), s.input.len(), s.warnings.len()), (0, 5, 1));
}

#[test]
fn identity_split_is_eighty_twenty() {
    let (train, held) = identity_split(64);
    assert_eq!((train, held), (0..51, 51..64));
    let d: Dataset<f32> = Dataset::generate(&small(2, 200)).unwrap();
    let (a, b) = d.partition_by_identity();
    assert_eq!(a.len() + b.len(), 200);
    assert!(a.iter().all(|&i| d.samples[i].identity < 51));
    assert!(b.iter().all(|&i| d.samples[i].identity >= 51));
    assert_eq!(d.images(&a[..3]).unwrap().shape(), &[3, 3, 32, 32]);
    assert_eq!(d.masks(&b[..2], Attribute::Glasses).unwrap().shape(), &[2, 1, 32, 32]);
    assert!(d.masks(&b[..2], Attribute::Elderly).is_err());
}

/// A fresh two-conv classifier separates the identities on held-out samples.
#[test]
fn identities_are_separable() {
    let n_ids = 64;
    let cfg = GeneratorConfig { n: 64 * 30, n_identities: n_ids, ..small(21, 0) };
    let data: Dataset<f32> = Dataset::generate(&cfg).unwrap();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 5 != 0);
    let conv = |channels, stride| LayerSpec::new(LayerKind::Conv { channels, kernel: 3, pad: 1, stride });
    let relu = || LayerSpec::new(LayerKind::Activation(Activation::Relu));
    let spec = NetworkSpec {
        input: [3, 32, 32],
        layers: vec![
            conv(16, 2),
            relu(),
            conv(32, 2),
            relu(),
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Dense { units: n_ids }),
        ],
        scale: Scale::ONE,
    };
    let mut net: Network<f32> = Network::new("probe", spec, 1).unwrap();
    let mut adam = Adam32::new(AdamConfig::with_lr(2e-3), net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut order = train.clone();
    for _epoch in 0..16 {
        order.shuffle(&mut rng);
        for batch in order.chunks(32) {
            let mut g = Graph32::new();
            let x = g.constant(data.images(batch).unwrap());
            let p = net.register(&mut g, ParamMode::Trainable);
            let logits = net.forward_with(&mut g, x, &p).unwrap().output;
            let labels: Vec<usize> = batch.iter().map(|&i| data.samples[i].identity).collect();
            let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
            g.backward(loss).unwrap();
            let grads = net.grads(&g, &p);
            adam.step(net.params_mut(), &grads).unwrap();
        }
    }
    let logits: Tensor32 = net.infer(&data.images(&test).unwrap()).unwrap();
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(k, &i)| {
            let row = &logits.data()[k * n_ids..(k + 1) * n_ids];
            let arg = (0..n_ids).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            arg == data.samples[i].identity
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    println!("held-out identity accuracy {acc:.4}");
    assert!(acc >= 0.95, "held-out identity accuracy {acc}");
}
