//! Closed-form anchors and direct-summation oracles for the objectives.

use diat_core::losses::{self, GeneratorLoss, LossConfig};
use diat_core::nn::{build_denoising_net, build_discriminator, build_identity_embedder};
use diat_core::{Graph64, ParamMode, Scale, Tensor64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor64 {
    Tensor64::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn scalar(g: &Graph64, v: diat_core::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn perceptual_loss_closed_forms() {
    let mut g = Graph64::new();
    let a = g.constant(Tensor64::ones(&[2, 2, 2]).unwrap());
    let z = g.constant(Tensor64::zeros(&[2, 2, 2]).unwrap());
    let l = losses::perceptual_content_loss(&mut g, a, z).unwrap();
    assert_eq!(scalar(&g, l), 0.5);
    let same = losses::perceptual_content_loss(&mut g, a, a).unwrap();
    assert_eq!(scalar(&g, same), 0.0);
    let bad = g.constant(Tensor64::ones(&[2, 2, 3]).unwrap());
    assert!(losses::perceptual_content_loss(&mut g, a, bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perceptual_loss_matches_direct_sum(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let a = rand_t(&[n, c, h, w], seed, -1.0, 1.0);
        let b = rand_t(&[n, c, h, w], seed ^ 9, -1.0, 1.0);
        let mut g = Graph64::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = losses::perceptual_content_loss(&mut g, av, bv).unwrap();
        let ssd: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let expect = ssd / (2.0 * (c * h * w) as f64) / n as f64;
        prop_assert!((scalar(&g, l) - expect).abs() < 1e-12);
    }

    /// Doubling C*H*W with identical per-entry differences keeps the value.
    #[test]
    fn perceptual_loss_is_size_invariant(c in 1usize..4, h in 1usize..5, w in 1usize..5, d in -2.0f64..2.0) {
        let value = |shape: &[usize]| {
            let mut g = Graph64::new();
            let a = g.constant(Tensor64::full(shape, d).unwrap());
            let z = g.constant(Tensor64::zeros(shape).unwrap());
            let l = losses::perceptual_content_loss(&mut g, a, z).unwrap();
            scalar(&g, l)
        };
        let small = value(&[c, h, w]);
        prop_assert!((small - value(&[2 * c, h, w])).abs() < 1e-12);
        prop_assert!((small - value(&[c, h, 2 * w])).abs() < 1e-12);
    }

    #[test]
    fn loss_d_at_half_is_two_log_two(n in 1usize..8, m in 1usize..8) {
        let mut g = Graph64::new();
        let real = g.constant(Tensor64::full(&[n, 1], 0.5).unwrap());
        let fake = g.constant(Tensor64::full(&[m, 1], 0.5).unwrap());
        let (ld, _) = losses::adversarial_losses(&mut g, real, fake, GeneratorLoss::NonSaturating).unwrap();
        prop_assert!((scalar(&g, ld) - 2.0 * 2f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn pretrain_recon_matches_elementwise(seed in any::<u64>(), n in 1usize..3) {
        let a = rand_t(&[n, 3, 4, 4], seed, 0.0, 1.0);
        let b = rand_t(&[n, 3, 4, 4], seed ^ 3, 0.0, 1.0);
        let mut g = Graph64::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = losses::pretrain_recon_loss(&mut g, av, bv).unwrap();
        let expect: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        prop_assert!((scalar(&g, l) - expect).abs() < 1e-12);
    }
}

#[test]
fn adversarial_anchors() {
    let mut g = Graph64::new();
    let one = g.constant(Tensor64::ones(&[3, 1]).unwrap());
    let zero = g.constant(Tensor64::zeros(&[3, 1]).unwrap());
    let (ld, _) = losses::adversarial_losses(&mut g, one, zero, GeneratorLoss::Saturating).unwrap();
    // clamped at 1e-7 on each side
    assert!(scalar(&g, ld) < 2.1e-7);
    assert!(scalar(&g, ld) >= 0.0);
}

#[test]
fn non_saturating_loss_falls_as_fake_score_rises() {
    let at = |p: f64, form| {
        let mut g = Graph64::new();
        let v = g.param(Tensor64::full(&[2, 1], p).unwrap());
        let l = losses::generator_adversarial_loss(&mut g, v, form).unwrap();
        g.backward(l).unwrap();
        (scalar(&g, l), g.grad(v).unwrap().data()[0])
    };
    for p in [0.1, 0.4, 0.8] {
        let (lo, grad) = at(p, GeneratorLoss::NonSaturating);
        let (hi, _) = at(p + 1e-3, GeneratorLoss::NonSaturating);
        assert!(hi < lo && grad < 0.0);
        let (lo, _) = at(p, GeneratorLoss::Saturating);
        let (hi, _) = at(p + 1e-3, GeneratorLoss::Saturating);
        assert!(hi < lo);
    }
}

#[test]
fn pretrain_losses_closed_forms() {
    let mut g = Graph64::new();
    let x = Tensor64::zeros(&[1, 3, 2, 2]).unwrap();
    let mut y = x.clone();
    y.data_mut()[5] = 2.0;
    let (xv, yv) = (g.constant(x), g.constant(y));
    let l = losses::pretrain_recon_loss(&mut g, yv, xv).unwrap();
    assert_eq!(scalar(&g, l), 4.0);
    let l = losses::pretrain_recon_loss(&mut g, xv, xv).unwrap();
    assert_eq!(scalar(&g, l), 0.0);

    let half = g.constant(Tensor64::full(&[5, 1], 0.5).unwrap());
    let l = losses::pretrain_disc_loss(&mut g, half, &[true, false, true, true, false]).unwrap();
    assert_eq!(scalar(&g, l), 5.0 * 0.25);
    let perfect = g.constant(Tensor64::new(&[2, 1], vec![1.0, 0.0]).unwrap());
    let l = losses::pretrain_disc_loss(&mut g, perfect, &[true, false]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
}

#[test]
fn denoiser_and_smooth_closed_forms() {
    let x = rand_t(&[2, 3, 4, 4], 1, 0.0, 1.0);
    let noise = rand_t(&[2, 3, 4, 4], 2, -0.1, 0.1);
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let l = losses::denoiser_objective(&mut g, xv, xv, xv).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    // f = identity, g(x) = x + n
    let nv = g.constant(noise.clone());
    let gx = g.add(xv, nv).unwrap();
    let l = losses::denoiser_objective(&mut g, gx, xv, xv).unwrap();
    let n2: f64 = noise.data().iter().map(|v| v * v).sum::<f64>() / 2.0;
    assert!((scalar(&g, l) - n2).abs() < 1e-12);

    let s = losses::smooth_regularizer(&mut g, xv, xv).unwrap();
    assert_eq!(scalar(&g, s), 0.0);
    let c = g.constant(Tensor64::full(&[1, 3, 2, 2], 0.3).unwrap());
    let zero = g.constant(Tensor64::zeros(&[1, 3, 2, 2]).unwrap());
    let s = losses::smooth_regularizer(&mut g, c, zero).unwrap();
    assert!((scalar(&g, s) - 12.0 * 0.09).abs() < 1e-12);
}

#[test]
fn identity_losses_vanish_at_fixed_points_and_compose() {
    let phi = build_identity_embedder::<f64>(Scale::DESK, 7, 3).unwrap();
    let d = build_discriminator::<f64>(Scale::DESK, 4).unwrap();
    let x = rand_t(&[2, 3, 32, 32], 5, 0.0, 1.0);
    let y = rand_t(&[2, 3, 32, 32], 6, 0.0, 1.0);
    let mut g = Graph64::new();
    let (xv, yv) = (g.constant(x), g.constant(y));
    let zero = losses::identity_loss(&mut g, &phi, xv, xv, [0.5, 0.5]).unwrap();
    assert_eq!(scalar(&g, zero), 0.0);
    let dp = d.register(&mut g, ParamMode::Frozen);
    let zero = losses::adaptive_identity_loss(&mut g, &d, &dp, xv, xv, [0.5, 0.5]).unwrap();
    assert_eq!(scalar(&g, zero), 0.0);

    // weighted composition of single-layer terms
    let both = losses::identity_loss(&mut g, &phi, yv, xv, [0.3, 0.7]).unwrap();
    let only5 = losses::identity_loss(&mut g, &phi, yv, xv, [0.0, 1.0]).unwrap();
    let only4 = losses::identity_loss(&mut g, &phi, yv, xv, [1.0, 0.0]).unwrap();
    let composed = 0.3 * scalar(&g, only4) + 0.7 * scalar(&g, only5);
    assert!((scalar(&g, both) - composed).abs() < 1e-12);
    let pp = phi.register(&mut g, ParamMode::Frozen);
    let a = losses::tap_features(&mut g, &phi, &pp, yv, &["conv5"]).unwrap();
    let b = losses::tap_features(&mut g, &phi, &pp, xv, &["conv5"]).unwrap();
    let direct = losses::perceptual_content_loss(&mut g, a[0], b[0]).unwrap();
    assert!((scalar(&g, direct) - scalar(&g, only5)).abs() < 1e-12);
    // symmetric in its arguments
    let swapped = losses::identity_loss(&mut g, &phi, xv, yv, [0.3, 0.7]).unwrap();
    assert!((scalar(&g, both) - scalar(&g, swapped)).abs() < 1e-12);
    // reconstruction objective is the identity loss by construction
    let rec = losses::reconstruction_objective(&mut g, &phi, yv, xv, [0.3, 0.7]).unwrap();
    assert_eq!(scalar(&g, rec), scalar(&g, both));
}

#[test]
fn adaptive_loss_moves_with_the_discriminator() {
    let mut d = build_discriminator::<f64>(Scale::DESK, 4).unwrap();
    let x = rand_t(&[1, 3, 32, 32], 5, 0.0, 1.0);
    let y = rand_t(&[1, 3, 32, 32], 6, 0.0, 1.0);
    let value = |d: &diat_core::Network64| {
        let mut g = Graph64::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let p = d.register(&mut g, ParamMode::Frozen);
        let l = losses::adaptive_identity_loss(&mut g, d, &p, yv, xv, [0.5, 0.5]).unwrap();
        scalar(&g, l)
    };
    let before = value(&d);
    // one discriminator update on its own loss, T and x fixed
    let mut g = Graph64::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let p = d.register(&mut g, ParamMode::Trainable);
    let real = d.forward_with(&mut g, xv, &p).unwrap().output;
    let fake = d.forward_with(&mut g, yv, &p).unwrap().output;
    let ld = losses::discriminator_adversarial_loss(&mut g, real, fake).unwrap();
    g.backward(ld).unwrap();
    let grads = d.grads(&g, &p);
    let mut adam = diat_core::Adam64::new(diat_core::AdamConfig::with_lr(1e-2), d.params());
    adam.step(d.params_mut(), &grads).unwrap();
    assert_ne!(value(&d), before);
}

#[test]
fn objectives_compose_their_terms() {
    let phi = build_identity_embedder::<f64>(Scale::DESK, 7, 3).unwrap();
    let d = build_discriminator::<f64>(Scale::DESK, 4).unwrap();
    let f = build_denoising_net::<f64>(32, 8, 5).unwrap();
    let x = rand_t(&[2, 3, 32, 32], 5, 0.0, 1.0);
    let tx = rand_t(&[2, 3, 32, 32], 6, 0.0, 1.0);
    let a = rand_t(&[2, 3, 32, 32], 7, 0.0, 1.0);
    let mut g = Graph64::new();
    let (xv, tv, av) = (g.constant(x), g.constant(tx), g.constant(a));
    let dp = d.register(&mut g, ParamMode::Frozen);
    let nets = losses::DiatNets { d: &d, d_params: &dp, f: &f, phi: &phi };

    let cfg = LossConfig::default();
    assert_eq!((cfg.lambda, cfg.gamma, cfg.beta, cfg.sigma), (0.1, 0.001, [0.1, 0.5, 1.0], 1.8));
    let (ld, terms) = losses::diat_objective(&mut g, &cfg, &nets, xv, tv, av).unwrap();
    let (id, sm) = (terms.identity.unwrap(), terms.smooth.unwrap());
    let expect = scalar(&g, terms.adversarial) + 0.1 * scalar(&g, id) + 0.001 * scalar(&g, sm);
    assert!((scalar(&g, terms.total) - expect).abs() < 1e-12);
    assert!(scalar(&g, id) >= 0.0 && scalar(&g, sm) >= 0.0);
    let fake = d.forward_with(&mut g, tv, &dp).unwrap().output;
    let real = d.forward_with(&mut g, av, &dp).unwrap().output;
    let (ld2, adv2) = losses::adversarial_losses(&mut g, real, fake, GeneratorLoss::NonSaturating).unwrap();
    assert!((scalar(&g, ld) - scalar(&g, ld2)).abs() < 1e-12);
    assert!((scalar(&g, terms.adversarial) - scalar(&g, adv2)).abs() < 1e-12);

    let pure = LossConfig { lambda: 0.0, gamma: 0.0, ..cfg.clone() };
    let (_, terms) = losses::diat_objective(&mut g, &pure, &nets, xv, tv, av).unwrap();
    assert!(terms.identity.is_none() && terms.smooth.is_none());
    assert_eq!(scalar(&g, terms.total), scalar(&g, terms.adversarial));

    let (_, terms) = losses::diat_a_objective(&mut g, &cfg, &d, &dp, xv, tv, av).unwrap();
    assert!(terms.smooth.is_none());
    let aid = losses::adaptive_identity_loss(&mut g, &d, &dp, tv, xv, cfg.identity_weights).unwrap();
    let expect = scalar(&g, terms.adversarial) + 0.1 * scalar(&g, aid);
    assert!((scalar(&g, terms.total) - expect).abs() < 1e-12);
    let (_, terms) = losses::diat_a_objective(&mut g, &pure, &d, &dp, xv, tv, av).unwrap();
    assert_eq!(scalar(&g, terms.total), scalar(&g, terms.adversarial));
}

#[test]
fn enhancement_losses() {
    let phi = build_identity_embedder::<f64>(Scale::DESK, 7, 3).unwrap();
    let x = rand_t(&[2, 3, 32, 32], 1, 0.0, 1.0);
    let tx = rand_t(&[2, 3, 32, 32], 2, 0.0, 1.0);
    let mut g = Graph64::new();
    let (xv, tv) = (g.constant(x.clone()), g.constant(tx.clone()));
    let zeros = g.constant(Tensor64::zeros(&[2, 3, 32, 32]).unwrap());
    let ones = g.constant(Tensor64::ones(&[2, 3, 32, 32]).unwrap());
    // m = 0 and E(.) = x
    let l = losses::local_enhance_loss(&mut g, &phi, xv, tv, xv, zeros, [0.1, 0.5, 1.0]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    // m = 1 and E(.) = T(x)
    let l = losses::local_enhance_loss(&mut g, &phi, tv, tv, xv, ones, [0.1, 0.5, 1.0]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    // m = 0 reduces to the pixel term
    let l = losses::local_enhance_loss(&mut g, &phi, tv, tv, xv, zeros, [0.1, 0.5, 1.0]).unwrap();
    let pix: f64 = x.data().iter().zip(tx.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
    assert!((scalar(&g, l) - pix).abs() < 1e-9);
    // m = 1: beta-weighted sum of single-tap terms
    let pp = phi.register(&mut g, ParamMode::Frozen);
    let a = losses::tap_features(&mut g, &phi, &pp, tv, &losses::ENHANCE_TAPS).unwrap();
    let b = losses::tap_features(&mut g, &phi, &pp, xv, &losses::ENHANCE_TAPS).unwrap();
    let mut expect = 0.0;
    for (i, beta) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let t = losses::perceptual_content_loss(&mut g, a[i], b[i]).unwrap();
        expect += beta * scalar(&g, t);
    }
    let l = losses::local_enhance_loss(&mut g, &phi, xv, tv, xv, ones, [0.1, 0.5, 1.0]).unwrap();
    assert!((scalar(&g, l) - expect).abs() < 1e-12);
    let small = g.constant(Tensor64::ones(&[2, 3, 16, 16]).unwrap());
    assert!(losses::local_enhance_loss(&mut g, &phi, xv, tv, xv, small, [0.1, 0.5, 1.0]).is_err());

    // global: E = identity gives ||B(x) - x||^2
    let bx = g.gaussian_blur(xv, 1.8).unwrap();
    let l = losses::global_enhance_loss(&mut g, bx, xv).unwrap();
    let bxv = g.value(bx).clone();
    let expect: f64 = bxv.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
    assert!((scalar(&g, l) - expect).abs() < 1e-9);
    let l = losses::global_enhance_loss(&mut g, xv, xv).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
}

#[test]
fn global_enhance_on_tiny_images_matches_oracle() {
    let x = rand_t(&[1, 1, 4, 4], 3, 0.0, 1.0);
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let bx = g.gaussian_blur(xv, 1.0).unwrap();
    let l = losses::global_enhance_loss(&mut g, bx, xv).unwrap();
    // separable blur with reflect-101 edges computed by hand
    let k = diat_core::kernels::gaussian_kernel(1.0);
    let r = (k.len() / 2) as isize;
    let at = |i: isize| diat_core::kernels::reflect_index(i, 4);
    let mut tmp = [[0.0; 4]; 4];
    for y in 0..4 {
        for xx in 0..4isize {
            tmp[y][xx as usize] = (-r..=r).map(|d| k[(d + r) as usize] * x.data()[y * 4 + at(xx + d)]).sum();
        }
    }
    let mut ssd = 0.0;
    for y in 0..4isize {
        for xx in 0..4 {
            let v: f64 = (-r..=r).map(|d| k[(d + r) as usize] * tmp[at(y + d)][xx]).sum();
            ssd += (v - x.data()[y as usize * 4 + xx]).powi(2);
        }
    }
    assert!((scalar(&g, l) - ssd).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    assert!(LossConfig { sigma: 0.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { lambda: -0.1, ..LossConfig::default() }.validate().is_err());
}

#[test]
fn frozen_denoiser_sees_no_gradient() {
    let f = build_denoising_net::<f64>(8, 4, 1).unwrap();
    let mut g = Graph64::new();
    let tx = g.param(rand_t(&[1, 3, 8, 8], 3, 0.0, 1.0));
    let fp = f.register(&mut g, ParamMode::Frozen);
    let ftx = f.forward_with(&mut g, tx, &fp).unwrap().output;
    let l = losses::smooth_regularizer(&mut g, ftx, tx).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(tx).is_some());
    assert!(fp.iter().all(|&p| g.grad(p).is_none()));
}
