// SPDX-License-Identifier: MIT OR Apache-2.0

use conceptdrive_core::policy::{
    adam_step, dataset_loss, finite_diff_check, policy_forward, train, Activation, AdamConfig, AdamState, Control,
    Maneuver, PlateauScheduler, PolicyConfig, PolicyParams, TrainConfig, TrainRecord,
};
use conceptdrive_core::{rng, FeatureMap};

fn random_map(rows: usize, cols: usize, dim: usize, seed: u64) -> FeatureMap {
    let mut r = rng::stream(seed, &[2]);
    FeatureMap::new(rows, cols, dim, (0..rows * cols * dim).map(|_| rng::uniform(&mut r, -0.5, 0.5) as f32).collect())
        .unwrap()
}

#[test]
fn backprop_matches_central_differences() {
    let cfg = PolicyConfig::new((6, 8), 32);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let p = PolicyParams::seeded(cfg, seed);
        let f = random_map(6, 8, 32, seed + 10);
        let teacher = Control::steer(0.3 - 0.1 * seed as f64);
        worst = worst.max(finite_diff_check(&p, &f, &teacher, 1e-5, 60, seed).unwrap());
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

/// Textbook Adam on a single coordinate.
fn reference_adam(grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    x
}

#[test]
fn adam_matches_the_textbook_recursion() {
    let grads: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
    let mut p = [0.0];
    let mut s = AdamState::new(1);
    let cfg = AdamConfig::default();
    for &g in &grads {
        adam_step(&mut p, &[g], &mut s, &cfg, cfg.lr).unwrap();
    }
    assert!((p[0] - reference_adam(&grads, cfg.lr)).abs() < 1e-14);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let target = [1.0, -2.0, 0.5];
    let mut p = [0.0; 3];
    let mut s = AdamState::new(3);
    let cfg = AdamConfig { lr: 0.05, ..Default::default() };
    for _ in 0..2000 {
        let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
        adam_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
    }
    for (x, t) in p.iter().zip(&target) {
        assert!((x - t).abs() < 1e-3);
    }
}

fn linear_dataset(n: usize, seed: u64) -> Vec<TrainRecord> {
    // steering is a fixed linear function of the features, inside the clamp
    let w: Vec<f64> = {
        let mut r = rng::stream(seed, &[3]);
        (0..24).map(|_| rng::uniform(&mut r, -0.1, 0.1)).collect()
    };
    (0..n)
        .map(|i| {
            let f = random_map(2, 3, 4, seed * 1000 + i as u64);
            let y: f64 = f.as_slice().iter().zip(&w).map(|(&x, w)| f64::from(x) * w).sum();
            TrainRecord { features: f, teacher: Control::steer(y), label: Maneuver::LaneStable }
        })
        .collect()
}

#[test]
fn cloning_fits_a_realizable_teacher() {
    let data = linear_dataset(400, 1);
    let mut cfg = PolicyConfig::new((2, 3), 4);
    cfg.hidden = 8;
    cfg.activation = Activation::Identity;
    let init = PolicyParams::seeded(cfg, 2);
    let before = dataset_loss(&init, &data).unwrap();
    let tc = TrainConfig { epochs: 200, batch_size: 32, seed: 3, adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
    let out = train(&data, init, &tc).unwrap();
    let after = dataset_loss(&out.params, &data).unwrap();
    assert!(after < 1e-3 * before, "{before} -> {after}");
    assert!(out.lr_curve.iter().all(|&lr| lr == 1e-2));
    assert_eq!(train(&data, PolicyParams::seeded(cfg, 2), &tc).unwrap(), out);
}

#[test]
fn steering_is_clamped() {
    let mut cfg = PolicyConfig::new((1, 1), 1);
    cfg.hidden = 1;
    let mut p = PolicyParams::zeros(cfg);
    let n = p.theta.len();
    p.theta[n - 2] = 3.0; // steering bias
    let f = FeatureMap::zeros(1, 1, 1);
    assert_eq!(policy_forward(&p, &f).unwrap().steering, 0.5);
    p.theta[n - 2] = -3.0;
    assert_eq!(policy_forward(&p, &f).unwrap().steering, -0.5);
}

#[test]
fn plateau_schedule_reduces_after_patience() {
    let mut s = PlateauScheduler::new(1.0, 0.5, 2);
    assert_eq!(s.observe(1.0), 1.0);
    assert_eq!(s.observe(1.0), 1.0);
    assert_eq!(s.observe(1.0), 1.0);
    assert_eq!(s.observe(1.0), 0.5);
    assert_eq!(s.observe(0.1), 0.5);
    let mut constant = PlateauScheduler::new(1e-3, 1.0, 0);
    assert!((0..20).all(|_| constant.observe(1.0) == 1e-3));
}

#[test]
fn empty_or_mismatched_data_is_rejected() {
    let cfg = PolicyConfig::new((2, 3), 4);
    assert!(train(&[], PolicyParams::zeros(cfg), &TrainConfig::default()).is_err());
    let data = linear_dataset(3, 0);
    let wrong = PolicyConfig::new((3, 2), 4);
    assert!(train(&data, PolicyParams::zeros(wrong), &TrainConfig::default()).is_err());
}
