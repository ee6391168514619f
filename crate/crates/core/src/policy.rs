// SPDX-License-Identifier: MIT OR Apache-2.0

//! The control head: a two-layer perceptron over a flattened feature map,
//! trained by behavior cloning with Adam.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{bail, Result};
use crate::feature::FeatureMap;
use crate::rng;

/// Steering is a curvature command (1/m); acceleration is m/s².
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub steering: f64,
    pub acceleration: f64,
}

impl Control {
    pub fn steer(steering: f64) -> Self {
        Self { steering, acceleration: 0.0 }
    }
}

/// Driving phase assigned by the teacher's state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Maneuver {
    LaneStable,
    Avoidance,
    Recovery,
}

impl Maneuver {
    pub const ALL: [Maneuver; 3] = [Maneuver::LaneStable, Maneuver::Avoidance, Maneuver::Recovery];

    pub fn name(self) -> &'static str {
        match self {
            Maneuver::LaneStable => "lane_stable",
            Maneuver::Avoidance => "avoidance",
            Maneuver::Recovery => "recovery",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lane_stable" => Ok(Maneuver::LaneStable),
            "avoidance" => Ok(Maneuver::Avoidance),
            "recovery" => Ok(Maneuver::Recovery),
            other => bail!(Config, "unknown maneuver '{other}'"),
        }
    }
}

/// A supervised sample: features, the teacher's command and its phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub features: FeatureMap,
    pub teacher: Control,
    pub label: Maneuver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// No nonlinearity: the policy is linear in its input.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    /// Feature grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub max_steering: f64,
}

impl PolicyConfig {
    pub fn new(grid: (usize, usize), feature_dim: usize) -> Self {
        Self { grid, feature_dim, hidden: 32, activation: Activation::Tanh, max_steering: 0.5 }
    }

    pub fn input_dim(&self) -> usize {
        self.grid.0 * self.grid.1 * self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        let (i, h) = (self.input_dim(), self.hidden);
        h * i + h + 2 * h + 2
    }
}

/// Flat parameter vector laid out as `W1 (hidden × input) | b1 | W2 (2 × hidden) | b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub theta: Vec<f64>,
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        Self { config, theta: vec![0.0; config.param_count()] }
    }

    /// Uniform fan-in initialization, zero biases.
    pub fn seeded(config: PolicyConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let o = p.offsets();
        let mut r = rng::stream(seed, &[0x9011]);
        let a1 = 1.0 / libm::sqrt(config.input_dim() as f64);
        let a2 = 1.0 / libm::sqrt(config.hidden as f64);
        for w in &mut p.theta[..o.b1] {
            *w = rng::uniform(&mut r, -a1, a1);
        }
        for w in &mut p.theta[o.w2..o.b2] {
            *w = rng::uniform(&mut r, -a2, a2);
        }
        p
    }

    pub fn from_theta(config: PolicyConfig, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != config.param_count() {
            bail!(Dimension, "policy needs {} parameters, got {}", config.param_count(), theta.len());
        }
        if theta.iter().any(|t| !t.is_finite()) {
            bail!(Validation, "policy parameters are not finite");
        }
        Ok(Self { config, theta })
    }

    fn offsets(&self) -> Offsets {
        let (i, h) = (self.config.input_dim(), self.config.hidden);
        let b1 = h * i;
        Offsets { b1, w2: b1 + h, b2: b1 + h + 2 * h }
    }

    /// Named blocks: `(name, shape, values)`.
    pub fn blocks(&self) -> [(&'static str, Vec<usize>, &[f64]); 4] {
        let o = self.offsets();
        let (i, h) = (self.config.input_dim(), self.config.hidden);
        [
            ("w1", vec![h, i], &self.theta[..o.b1]),
            ("b1", vec![h], &self.theta[o.b1..o.w2]),
            ("w2", vec![2, h], &self.theta[o.w2..o.b2]),
            ("b2", vec![2], &self.theta[o.b2..]),
        ]
    }

    fn check_input(&self, features: &FeatureMap) -> Result<()> {
        let c = &self.config;
        if (features.rows(), features.cols(), features.dim()) != (c.grid.0, c.grid.1, c.feature_dim) {
            bail!(
                Dimension,
                "feature map {}x{}x{} for a policy over {}x{}x{}",
                features.rows(),
                features.cols(),
                features.dim(),
                c.grid.0,
                c.grid.1,
                c.feature_dim
            );
        }
        Ok(())
    }

    /// Unclamped outputs and the hidden activations.
    fn forward_raw(&self, x: &[f32], hidden: &mut [f64]) -> [f64; 2] {
        let o = self.offsets();
        let n_in = x.len();
        let act = self.config.activation;
        for (k, a) in hidden.iter_mut().enumerate() {
            let w = &self.theta[k * n_in..(k + 1) * n_in];
            *a = act.apply(self.theta[o.b1 + k] + dot_mixed(w, x));
        }
        let h = hidden.len();
        let mut out = [self.theta[o.b2], self.theta[o.b2 + 1]];
        for (c, y) in out.iter_mut().enumerate() {
            let w2 = &self.theta[o.w2 + c * h..o.w2 + (c + 1) * h];
            *y += w2.iter().zip(hidden.iter()).map(|(w, a)| w * a).sum::<f64>();
        }
        out
    }

    /// Raw (unclamped) steering output.
    pub fn raw_steering(&self, features: &FeatureMap) -> Result<f64> {
        self.check_input(features)?;
        let mut hidden = vec![0.0; self.config.hidden];
        Ok(self.forward_raw(features.as_slice(), &mut hidden)[0])
    }

    /// Accumulates `scale · ∂(out · d_out)/∂θ` into `grad`.
    fn backward(&self, x: &[f32], hidden: &[f64], d_out: [f64; 2], scale: f64, grad: &mut [f64]) {
        let o = self.offsets();
        let n_in = x.len();
        let h = hidden.len();
        let act = self.config.activation;
        for (c, &d) in d_out.iter().enumerate() {
            grad[o.b2 + c] += scale * d;
            for k in 0..h {
                grad[o.w2 + c * h + k] += scale * d * hidden[k];
            }
        }
        for k in 0..h {
            let back = d_out[0] * self.theta[o.w2 + k] + d_out[1] * self.theta[o.w2 + h + k];
            let dz = scale * back * act.slope(hidden[k]);
            if dz == 0.0 {
                continue;
            }
            grad[o.b1 + k] += dz;
            for (g, &xi) in grad[k * n_in..(k + 1) * n_in].iter_mut().zip(x) {
                *g += dz * f64::from(xi);
            }
        }
    }

    /// Gradient of the steering loss against `teacher` for one sample.
    pub fn loss_gradient(&self, features: &FeatureMap, teacher: &Control) -> Result<(f64, Vec<f64>)> {
        self.check_input(features)?;
        let mut hidden = vec![0.0; self.config.hidden];
        let out = self.forward_raw(features.as_slice(), &mut hidden);
        let err = out[0] - teacher.steering;
        let mut grad = vec![0.0; self.theta.len()];
        self.backward(features.as_slice(), &hidden, [2.0 * err, 0.0], 1.0, &mut grad);
        Ok((err * err, grad))
    }
}

/// `φ(F')`: steering clamped to `±max_steering`; fixed speed, so zero
/// acceleration.
pub fn policy_forward(params: &PolicyParams, features: &FeatureMap) -> Result<Control> {
    let s = params.raw_steering(features)?;
    let m = params.config.max_steering;
    Ok(Control::steer(s.clamp(-m, m)))
}

/// Squared steering error.
pub fn loss(predicted: &Control, teacher: &Control) -> f64 {
    let e = predicted.steering - teacher.steering;
    e * e
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far; the next step is `t + 1`.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        bail!(Dimension, "adam: {} params, {} grads, {} moments", params.len(), grads.len(), state.m.len());
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        bail!(Training, "non-finite gradient at parameter {i}");
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, f64::from(t));
    let c2 = 1.0 - libm::pow(cfg.beta2, f64::from(t));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule. A `factor` of 1 keeps the
/// rate constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { factor, patience, lr, best: f64::INFINITY, stale: 0 }
    }

    /// Records an epoch loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batch size; `0` means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, seed: 0, adam: AdamConfig::default(), plateau_factor: 1.0, plateau_patience: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Mean mini-batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Learning rate used in each epoch.
    pub lr_curve: Vec<f64>,
}

/// Mini-batch behavior cloning with Adam and a plateau schedule.
pub fn train(dataset: &[TrainRecord], init: PolicyParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        bail!(Config, "cannot train on an empty dataset");
    }
    for rec in dataset {
        init.check_input(&rec.features)?;
    }
    let mut params = init;
    let mut state = AdamState::new(params.theta.len());
    let mut sched = PlateauScheduler::new(cfg.adam.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch = if cfg.batch_size == 0 { dataset.len() } else { cfg.batch_size };
    let mut hidden = vec![0.0; params.config.hidden];
    let mut grad = vec![0.0; params.theta.len()];
    let (mut loss_curve, mut lr_curve) = (Vec::new(), Vec::new());
    let mut lr = sched.lr;
    for epoch in 0..cfg.epochs {
        if cfg.batch_size != 0 {
            order.shuffle(&mut rng::stream(cfg.seed, &[0x7A11, epoch as u64]));
        }
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let rec = &dataset[i];
                let x = rec.features.as_slice();
                let out = params.forward_raw(x, &mut hidden);
                let err = out[0] - rec.teacher.steering;
                total += err * err;
                params.backward(x, &hidden, [2.0 * err, 0.0], scale, &mut grad);
            }
            adam_step(&mut params.theta, &grad, &mut state, &cfg.adam, lr)?;
        }
        let epoch_loss = total / dataset.len() as f64;
        if !epoch_loss.is_finite() {
            bail!(Training, "loss diverged at epoch {epoch}");
        }
        loss_curve.push(epoch_loss);
        lr_curve.push(lr);
        lr = sched.observe(epoch_loss);
    }
    Ok(TrainOutcome { params, loss_curve, lr_curve })
}

/// Mean steering loss of `params` over `dataset`.
pub fn dataset_loss(params: &PolicyParams, dataset: &[TrainRecord]) -> Result<f64> {
    let mut total = 0.0;
    for rec in dataset {
        let e = params.raw_steering(&rec.features)? - rec.teacher.steering;
        total += e * e;
    }
    Ok(total / dataset.len().max(1) as f64)
}

/// `w · x` with eight independent partial sums.
fn dot_mixed(w: &[f64], x: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (wc, xc) = (w.chunks_exact(8), x.chunks_exact(8));
    let tail: f64 = wc.remainder().iter().zip(xc.remainder()).map(|(a, &b)| a * f64::from(b)).sum();
    for (wb, xb) in wc.zip(xc) {
        for i in 0..8 {
            acc[i] += wb[i] * f64::from(xb[i]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Relative error with a floor on the denominator, so that parameters
/// whose true gradient is zero are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares backprop against central differences of the steering loss on
/// `samples` randomly chosen parameters (all of them if there are fewer).
/// Returns the largest relative error.
pub fn finite_diff_check(
    params: &PolicyParams,
    features: &FeatureMap,
    teacher: &Control,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grad) = params.loss_gradient(features, teacher)?;
    let n = params.theta.len();
    let picks: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut r = rng::stream(seed, &[0xFD]);
        (0..samples).map(|_| r.random_range(0..n)).collect()
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let orig = probe.theta[i];
        probe.theta[i] = orig + h;
        let up = loss(&Control::steer(probe.raw_steering(features)?), teacher);
        probe.theta[i] = orig - h;
        let down = loss(&Control::steer(probe.raw_steering(features)?), teacher);
        probe.theta[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PolicyConfig {
        PolicyConfig { hidden: 5, ..PolicyConfig::new((2, 2), 3) }
    }

    fn fmap(seed: u64) -> FeatureMap {
        let mut r = rng::stream(seed, &[1]);
        FeatureMap::new(2, 2, 3, (0..12).map(|_| rng::uniform(&mut r, -1.0, 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn zero_network_steers_straight() {
        let p = PolicyParams::zeros(cfg());
        assert_eq!(policy_forward(&p, &fmap(1)).unwrap(), Control::steer(0.0));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let p = PolicyParams::seeded(cfg(), 4);
        let f = fmap(2);
        let (i, h) = (12, 5);
        let x: Vec<f64> = f.as_slice().iter().map(|&v| f64::from(v)).collect();
        let mut out = p.theta[h * i + h + 2 * h];
        for k in 0..h {
            let mut z = p.theta[h * i + k];
            for c in 0..i {
                z += p.theta[k * i + c] * x[c];
            }
            out += p.theta[h * i + h + k] * libm::tanh(z);
        }
        let got = policy_forward(&p, &f).unwrap().steering;
        assert!((got - out.clamp(-0.5, 0.5)).abs() < 1e-12);
        assert!(matches!(policy_forward(&p, &FeatureMap::zeros(2, 3, 3)), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&Control::steer(0.2), &Control::steer(0.2)), 0.0);
        assert!((loss(&Control::steer(0.1), &Control::steer(0.3)) - 0.04).abs() < 1e-15);
        assert_eq!(
            loss(&Control::steer(-0.7), &Control::steer(0.3)),
            loss(&Control::steer(0.3), &Control::steer(-0.7))
        );
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        let c = AdamConfig::default();
        adam_step(&mut p, &[1.0], &mut s, &c, c.lr).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        // zero gradient on a fresh state leaves parameters alone
        let mut q = [5.0];
        adam_step(&mut q, &[0.0], &mut AdamState::new(1), &c, c.lr).unwrap();
        assert_eq!(q[0], 5.0);
        // and decays existing moments by the betas
        let (m, v) = (s.m[0], s.v[0]);
        adam_step(&mut p, &[0.0], &mut s, &c, c.lr).unwrap();
        assert_eq!(s.m[0], c.beta1 * m);
        assert_eq!(s.v[0], c.beta2 * v);
        assert!(matches!(adam_step(&mut p, &[f64::NAN], &mut s, &c, c.lr), Err(crate::Error::Training(_))));
    }

    #[test]
    fn plateau_with_unit_factor_is_constant() {
        let mut s = PlateauScheduler::new(1e-3, 1.0, 10);
        for _ in 0..50 {
            assert_eq!(s.observe(1.0), 1e-3);
        }
        let mut s = PlateauScheduler::new(1.0, 0.5, 2);
        let lrs: Vec<f64> = [3.0, 3.0, 3.0, 3.0].iter().map(|&l| s.observe(l)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn gradient_checks() {
        let teacher = Control::steer(0.3);
        let lin = PolicyParams::seeded(PolicyConfig { activation: Activation::Identity, ..cfg() }, 6);
        assert!(finite_diff_check(&lin, &fmap(3), &teacher, 1e-4, 100, 1).unwrap() < 1e-8);
        let nl = PolicyParams::seeded(cfg(), 7);
        assert!(finite_diff_check(&nl, &fmap(4), &teacher, 1e-4, 100, 1).unwrap() < 1e-5);
    }

    #[test]
    fn zero_input_gives_zero_first_layer_gradient() {
        let p = PolicyParams::seeded(cfg(), 8);
        let (_, g) = p.loss_gradient(&FeatureMap::zeros(2, 2, 3), &Control::steer(0.4)).unwrap();
        assert!(g[..5 * 12].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn train_edge_cases() {
        let init = PolicyParams::seeded(cfg(), 1);
        assert!(matches!(train(&[], init.clone(), &TrainConfig::default()), Err(crate::Error::Config(_))));
        let data = vec![TrainRecord { features: fmap(1), teacher: Control::steer(0.2), label: Maneuver::LaneStable }];
        let out = train(&data, init.clone(), &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.params, init);
        let out = train(&data, init, &TrainConfig { epochs: 7, ..Default::default() }).unwrap();
        assert_eq!(out.loss_curve.len(), 7);
    }
}
