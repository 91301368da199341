use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;
use crate::data::rng_from;
use crate::network::{
    forward_full, init_params, BnMode, LayerOp, LayerSpec, NetworkSpec, ParamStore,
};
use crate::zoo::{gen_shapes, micro_gen, micro_vgg, train_classifier, ClassifierTrainConfig, MicroGenConfig, MicroVggConfig, ShapesConfig};

fn tiny_classifier() -> &'static (NetworkSpec, ParamStore, Tensor, Vec<usize>) {
    static CELL: OnceLock<(NetworkSpec, ParamStore, Tensor, Vec<usize>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = micro_vgg(&MicroVggConfig {
            size: 16,
            widths: [4, 4, 8, 8, 8, 8],
            ..Default::default()
        })
        .unwrap();
        let (train, val) = gen_shapes(&ShapesConfig {
            size: 16,
            extent: [2, 6],
            per_class: 40,
            ..Default::default()
        })
        .unwrap();
        let cfg = ClassifierTrainConfig {
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let (params, _) = train_classifier(&spec, &train, &val, &cfg).unwrap();
        (spec, params, val.images, val.labels)
    })
}

fn untrained_inverse(spec: &NetworkSpec) -> InversionModel {
    let mut inv = InversionModel::new(spec, 4).unwrap();
    inv.trained_up_to = spec.num_blocks();
    inv
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng_from(seed))
}

#[test]
fn psnr_examples() {
    let x = uniform(&[2, 1, 4, 4], 1);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
    let zeros = Tensor::zeros(&[2, 1, 4, 4]);
    let tenth = Tensor::full(&[2, 1, 4, 4], 0.1);
    assert!((psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-12);
    let ones = Tensor::ones(&[2, 1, 4, 4]);
    assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
    // a larger error than the peak still reports 0 dB
    assert_eq!(psnr(&zeros, &Tensor::full(&[2, 1, 4, 4], 3.0), 1.0).unwrap(), 0.0);
    assert!(psnr(&zeros, &Tensor::zeros(&[2, 16]), 1.0).is_err());
    let per = psnr_per_image(&zeros, &tenth, 1.0).unwrap();
    assert_eq!(per.len(), 2);
    assert!(per.iter().all(|p| (p - 20.0).abs() < 1e-12));
}

proptest! {
    #[test]
    fn psnr_symmetric_and_permutation_invariant(seed in 0u64..1000, shift in 0usize..16) {
        let a = uniform(&[1, 1, 4, 4], seed);
        let b = uniform(&[1, 1, 4, 4], seed + 1);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
        let rot = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.data()[(i + shift) % 16]);
        prop_assert!((p - psnr(&rot(&a), &rot(&b), 1.0).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=99.0).contains(&p));
    }
}

#[test]
fn cycle_distance_zero_self_and_denominator_asymmetry() {
    let (spec, params, val, _) = tiny_classifier();
    let x = val.slice_batch(0, 6);
    let y = random_perturb(&x, 0.1, 3).unwrap();
    assert_eq!(cycle_distance(spec, params, &x, &x).unwrap(), 0.0);
    let mag = |t: &Tensor| -> f64 {
        let tr = forward_full(spec, params, t, BnMode::Eval).unwrap();
        (1..tr.states.len()).map(|l| tr.at(l).data().iter().map(|v| v.abs()).sum::<f64>() / tr.at(l).len() as f64).sum()
    };
    let dxy = cycle_distance(spec, params, &x, &y).unwrap();
    let dyx = cycle_distance(spec, params, &y, &x).unwrap();
    assert!(dxy > 0.0);
    assert!((dxy * mag(&x) - dyx * mag(&y)).abs() < 1e-12);
    let num = crate::dci::loss_cyc(spec, params, &x, &y).unwrap();
    assert!((dxy - num / mag(&x)).abs() < 1e-12);
}

#[test]
fn cycle_distance_rejects_zero_trace() {
    let spec = NetworkSpec {
        input_shape: vec![1, 3, 3],
        layers: vec![LayerSpec::conv(1, 1, 1, 1, 0)],
        block_ends: vec![1],
    };
    let params = init_params(&spec, 0).unwrap();
    let z = Tensor::zeros(&[2, 1, 3, 3]);
    assert!(cycle_distance(&spec, &params, &z, &Tensor::ones(&[2, 1, 3, 3])).is_err());
    assert!(cycle_distance_per_image(&spec, &params, &z, &z).is_err());
}

#[test]
fn cycle_distance_grows_with_perturbation_size() {
    let (spec, params, val, _) = tiny_classifier();
    let x = val.slice_batch(0, 16);
    let mut prev = (0.0, 0.0);
    for eps in [0.02, 0.05, 0.1, 0.2, 0.4] {
        let y = random_perturb(&x, eps, 11).unwrap();
        let d = cycle_distance(spec, params, &x, &y).unwrap();
        let l1 = mean_std(&l1_per_image(&x, &y).unwrap()).0;
        assert!(d > prev.0 && l1 > prev.1, "eps {eps}: {d} / {l1} after {prev:?}");
        prev = (d, l1);
    }
}

#[test]
fn attack_config_rules() {
    let c = AttackConfig::default();
    c.validate().unwrap();
    assert_eq!(c.step_size(), 2.0 / 255.0);
    assert!(AttackConfig { step: Some(0.1), ..c.clone() }.validate().is_err());
    assert!(AttackConfig { step: Some(0.0), ..c.clone() }.validate().is_err());
    assert!(AttackConfig { steps: 0, ..c.clone() }.validate().is_err());
    assert!(AttackConfig { eps: -1.0, ..c.clone() }.validate().is_err());
    AttackConfig { eps: 0.0, ..c }.validate().unwrap();
}

#[test]
fn pgd_respects_ball_and_range() {
    let (spec, params, val, labels) = tiny_classifier();
    let x = val.slice_batch(0, 8);
    for seed in 0..4 {
        let cfg = AttackConfig {
            eps: 0.05 * (seed + 1) as f64,
            steps: 5,
            seed,
            ..Default::default()
        };
        let adv = pgd_attack(spec, params, &x, &labels[..8], &cfg).unwrap();
        assert!(linf_distance(&adv, &x).unwrap() <= cfg.eps + 1e-15);
        assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let zero = AttackConfig { eps: 0.0, ..Default::default() };
    assert!(pgd_attack(spec, params, &x, &labels[..8], &zero).unwrap().bit_eq(&x));
}

#[test]
fn pgd_raises_the_loss() {
    let (spec, params, val, labels) = tiny_classifier();
    let n = 24;
    let x = val.slice_batch(0, n);
    let adv = pgd_attack(spec, params, &x, &labels[..n], &AttackConfig::default()).unwrap();
    let raised = (0..n)
        .filter(|&i| {
            let ce = |t: &Tensor| ce_and_grad(spec, params, &t.slice_batch(i, i + 1), &labels[i..i + 1]).unwrap().0;
            ce(&adv) >= ce(&x)
        })
        .count();
    assert!(raised as f64 >= 0.95 * n as f64, "{raised}/{n}");
}

#[test]
fn pgd_rejects_non_classifier() {
    let spec = NetworkSpec {
        input_shape: vec![1, 4, 4],
        layers: vec![LayerSpec::conv(1, 2, 3, 1, 1)],
        block_ends: vec![1],
    };
    let params = init_params(&spec, 0).unwrap();
    let x = uniform(&[2, 1, 4, 4], 0);
    assert!(pgd_attack(&spec, &params, &x, &[0, 1], &AttackConfig::default()).is_err());
}

#[test]
fn random_perturbation_magnitude() {
    let x = Tensor::full(&[5, 1, 6, 6], 0.5);
    let y = random_perturb(&x, 0.1, 7).unwrap();
    for i in 0..5 {
        let d = linf_distance(&y.slice_batch(i, i + 1), &x.slice_batch(i, i + 1)).unwrap();
        assert!((d - 0.1).abs() < 1e-15, "item {i}: {d}");
    }
    assert!(random_perturb(&x, 0.0, 7).unwrap().bit_eq(&x));
    let edge = uniform(&[3, 1, 6, 6], 2);
    let z = random_perturb(&edge, 0.3, 1).unwrap();
    assert!(linf_distance(&z, &edge).unwrap() <= 0.3 + 1e-15);
    assert!(z.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(random_perturb(&x, -0.1, 0).is_err());
}

#[test]
fn sign_test_matches_binomial_tail() {
    let first = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 0.0, 1.0];
    let second = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 1.0, 1.0];
    let t = sign_test(&first, &second).unwrap();
    assert_eq!((t.wins, t.losses, t.ties), (9, 1, 1));
    // P(X ≥ 9), X ~ Bin(10, 1/2) = (10 + 1) / 1024
    assert!((t.p_value - 11.0 / 1024.0).abs() < 1e-12);
    assert_eq!(sign_test(&[1.0], &[2.0]).unwrap().p_value, 1.0);
    assert!(sign_test(&[1.0], &[]).is_err());
}

#[test]
fn depth_sweep_rows_and_errors() {
    let (spec, params, val, _) = tiny_classifier();
    let inv = untrained_inverse(spec);
    let x = val.slice_batch(0, 20);
    let models = [(1, &inv), (3, &inv), (6, &inv)];
    let r = depth_sweep(spec, params, &models, &x).unwrap();
    assert_eq!(r.rows.iter().map(|r| r.depth).collect::<Vec<_>>(), vec![1, 3, 6]);
    for row in &r.rows {
        assert_eq!(row.report.psnr.len(), 20);
        assert_eq!(row.report.note, PERCEPTUAL_NOTE);
    }
    assert_eq!(r, depth_sweep(spec, params, &models, &x).unwrap());
    assert!(depth_sweep(spec, params, &[(3, &inv), (1, &inv)], &x).is_err());
    let mut shallow = inv.clone();
    shallow.trained_up_to = 2;
    assert!(depth_sweep(spec, params, &[(1, &shallow), (3, &shallow)], &x).is_err());
}

#[test]
fn chunked_reconstruction_matches_single_pass() {
    let (spec, params, val, _) = tiny_classifier();
    let inv = untrained_inverse(spec);
    let x = val.slice_batch(0, 23);
    let whole = inv.invert(&crate::network::forward_sub(spec, params, &x, 1, 2).unwrap(), 2).unwrap();
    let parts = reconstruct_from_depth(spec, params, &inv, &x, 2).unwrap();
    assert!(whole.zip_map(&parts, |a, b| a - b).unwrap().abs_max() < 1e-12);
}

#[test]
fn adversarial_gap_pairs_share_radius() {
    let (spec, params, val, labels) = tiny_classifier();
    let inv = untrained_inverse(spec);
    let x = val.slice_batch(0, 20);
    let cfg = AttackConfig { steps: 3, ..Default::default() };
    let gap = adversarial_gap(spec, params, &inv, &x, &labels[..20], 2, &cfg).unwrap();
    assert_eq!(gap.random.psnr.len(), 20);
    assert_eq!(gap.adversarial.psnr.len(), 20);
    assert_eq!(gap.eps, cfg.eps);
    let t = gap.sign_test;
    assert_eq!(t.wins + t.losses + t.ties, 20);
    let rnd = random_perturb(&x, cfg.eps, derive_seed(cfg.seed, "random-perturb", 0)).unwrap();
    let rec = reconstruct_from_depth(spec, params, &inv, &rnd, 2).unwrap();
    assert_eq!(gap.random.psnr, psnr_per_image(&x, &rec, 1.0).unwrap());
    assert!(adversarial_gap(spec, params, &inv, &x, &labels[..5], 2, &cfg).is_err());
}

/// `G(z)` reshapes a 4-vector into a 2×2 image; the inverse undoes it.
fn reshaping_generator() -> (NetworkSpec, ParamStore, InversionModel) {
    let spec = NetworkSpec {
        input_shape: vec![4],
        layers: vec![
            LayerSpec::dense(4, 4),
            LayerSpec::new(LayerOp::Reshape { shape: vec![1, 2, 2] }),
        ],
        block_ends: vec![2],
    };
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let mut params = init_params(&spec, 0).unwrap();
    params.tensors.insert("0.weight".into(), eye.clone());
    params.tensors.insert("0.bias".into(), Tensor::zeros(&[4]));
    let mut inv = untrained_inverse(&spec);
    for (name, t) in inv.params.tensors.iter_mut() {
        if name.ends_with(".weight") {
            *t = eye.clone();
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            *t = Tensor::zeros(t.shape());
        }
    }
    (spec, params, inv)
}

#[test]
fn exact_inverse_recovers_latents() {
    let (spec, params, inv) = reshaping_generator();
    assert!(inv.spec.bn_layers().is_empty());
    let r = latent_recover_eval(&spec, &params, &inv, 16, 3).unwrap();
    assert!(r.pixel_l1_mean < 1e-12 && r.latent_l1_mean < 1e-12, "{r:?}");
    let z = crate::zoo::sample_latent(4, 8, 1);
    let rp = reproject(&spec, &params, &inv, &z).unwrap();
    assert!(rp.images.zip_map(&generate(&spec, &params, &z).unwrap(), |a, b| a - b).unwrap().abs_max() < 1e-12);
    assert!((rp.latent_norm_mean - rp.recovered_norm_mean).abs() < 1e-12);
}

fn small_gen() -> (NetworkSpec, ParamStore, InversionModel) {
    let spec = micro_gen(&MicroGenConfig {
        latent_dim: 6,
        base_channels: 8,
        out_channels: 1,
    })
    .unwrap();
    let params = init_params(&spec, 2).unwrap();
    let inv = untrained_inverse(&spec);
    (spec, params, inv)
}

#[test]
fn interpolation_endpoints_are_bit_exact() {
    let (spec, params, inv) = small_gen();
    let x = generate(&spec, &params, &crate::zoo::sample_latent(6, 2, 9)).unwrap();
    let (x1, x2) = (x.slice_batch(0, 1), x.slice_batch(1, 2));
    let frames = interpolate_latents(&spec, &params, &inv, &x1, &x2, 5).unwrap();
    assert_eq!(frames.len(), 5);
    let g1 = generate(&spec, &params, &encode(&spec, &inv, &x1).unwrap()).unwrap();
    let g2 = generate(&spec, &params, &encode(&spec, &inv, &x2).unwrap()).unwrap();
    assert!(frames[0].bit_eq(&g1));
    assert!(frames[4].bit_eq(&g2));
    for f in &frames {
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(interpolate_latents(&spec, &params, &inv, &x1, &x2, 1).is_err());
}

#[test]
fn reprojection_and_real_vs_generated_shapes() {
    let (spec, params, inv) = small_gen();
    let z = crate::zoo::sample_latent(6, 4, 0).map(|v| 3.0 * v);
    let rp = reproject(&spec, &params, &inv, &z).unwrap();
    assert_eq!(rp.images.shape(), &[4, 1, 32, 32]);
    assert!(rp.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(rp.latent_norm_mean > 0.0 && rp.recovered_norm_mean.is_finite());
    let real = uniform(&[10, 1, 32, 32], 5);
    let r = real_vs_generated_eval(&spec, &params, &inv, &real, 8, 1).unwrap();
    assert_eq!((r.generated.len(), r.real.len()), (8, 8));
    assert!(real_vs_generated_eval(&spec, &params, &inv, &real, 11, 1).is_err());
    let wrong = untrained_inverse(&tiny_classifier().0);
    assert!(reproject(&spec, &params, &wrong, &z).is_err());
}

#[test]
fn input_opt_zero_steps_returns_init() {
    let (spec, params, val, _) = tiny_classifier();
    let x = val.slice_batch(0, 2);
    let emb = crate::network::forward_sub(spec, params, &x, 1, 2).unwrap();
    let cfg = InputOptConfig { steps: 0, seed: 4, ..Default::default() };
    let r = input_opt_invert(spec, params, &emb, 2, &cfg).unwrap();
    assert!(r.image.bit_eq(&uniform(&[2, 1, 16, 16], 4)));
    assert_eq!(r.best_step, 0);
    assert!(input_opt_invert(spec, params, &emb, 3, &cfg).is_err());
}

#[test]
fn input_opt_beats_its_initialization() {
    let (spec, params, val, _) = tiny_classifier();
    let x = val.slice_batch(0, 4);
    let emb = crate::network::forward_sub(spec, params, &x, 1, 1).unwrap();
    let cfg = InputOptConfig { steps: 300, seed: 1, ..Default::default() };
    let init = input_opt_invert(spec, params, &emb, 1, &InputOptConfig { steps: 0, ..cfg.clone() }).unwrap();
    let r = input_opt_invert(spec, params, &emb, 1, &cfg).unwrap();
    assert!(r.best_loss <= init.best_loss);
    let gain = psnr(&x, &r.image, 1.0).unwrap() - psnr(&x, &init.image, 1.0).unwrap();
    assert!(gain >= 3.0, "gain {gain} dB");
}
