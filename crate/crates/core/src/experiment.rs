// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end recipes: data collection, behavior cloning, threshold sweeps,
//! concept-subset debugging, augmented training, generalization to unseen
//! concepts, and maneuver classification from rollout features.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::analysis::{
    anchor_clusters, kmeans, project_grid, train_linear_svc, ClusterModel, LinearClassifier, SvcConfig,
};
use crate::concept::{augment_dataset, substitute, ConceptBank, Similarity, SubstitutionRule, SwapRecord};
use crate::error::{bail, Result};
use crate::feature::FeatureMap;
use crate::policy::{train, Maneuver, PolicyConfig, PolicyParams, TrainConfig, TrainRecord};
use crate::rng;
use crate::sim::{evaluate, rollout, Driver, Evaluation, FeaturePipeline, RolloutRecord, ScenarioFamily, SimConfig};

/// Everything needed to turn scenarios into observations.
#[derive(Debug, Clone)]
pub struct Harness {
    pub family: ScenarioFamily,
    pub sim: SimConfig,
    pub bank: ConceptBank,
    /// Per-component noise of the "image" features.
    pub feature_sigma: f64,
}

impl Harness {
    pub fn pipeline(&self, seed: u64) -> FeaturePipeline<'_> {
        FeaturePipeline { bank: &self.bank, noise_sigma: self.feature_sigma, substitution: None, seed }
    }

    pub fn policy_config(&self, hidden: usize) -> PolicyConfig {
        let mut cfg = PolicyConfig::new((self.sim.view.rows, self.sim.view.cols), self.bank.dim());
        cfg.hidden = hidden;
        cfg
    }

    /// Same harness with a different scenario family.
    pub fn with_family(&self, family: ScenarioFamily) -> Self {
        Self { family, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectConfig {
    /// Teacher demonstrations (one scenario each).
    pub scenarios: usize,
    /// Standard deviation of steering noise injected while the teacher
    /// drives; labels stay clean.
    pub steering_noise: f64,
    /// Rounds of policy-driven collection relabeled by the teacher.
    pub dagger_rounds: usize,
    pub dagger_scenarios: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { scenarios: 60, steering_noise: 0.05, dagger_rounds: 1, dagger_scenarios: 30, seed: 0 }
    }
}

fn records_of(driver: Driver<'_>, h: &Harness, scenarios: usize, seed: u64) -> Result<Vec<TrainRecord>> {
    let mut out = Vec::new();
    for i in 0..scenarios {
        let scenario = h.family.generate(seed, i as u64);
        let driver = match driver {
            Driver::NoisyTeacher { sigma, seed } => Driver::NoisyTeacher { sigma, seed: rng::derive(seed, i as u64) },
            other => other,
        };
        let rec = rollout(driver, &scenario, &h.sim, &h.pipeline(rng::derive(seed ^ 0xFEA7, i as u64)), true)?;
        out.extend(rec.steps.into_iter().map(|s| TrainRecord {
            features: s.features.expect("features recorded"),
            teacher: s.teacher,
            label: s.label,
        }));
    }
    Ok(out)
}

/// Teacher demonstrations with steering-noise injection.
pub fn collect_teacher_data(h: &Harness, cfg: &CollectConfig) -> Result<Vec<TrainRecord>> {
    let driver = if cfg.steering_noise > 0.0 {
        Driver::NoisyTeacher { sigma: cfg.steering_noise, seed: rng::derive(cfg.seed, 0xDA7A) }
    } else {
        Driver::Teacher
    };
    records_of(driver, h, cfg.scenarios, cfg.seed)
}

/// States visited by `params`, labeled by the teacher.
pub fn collect_policy_data(h: &Harness, params: &PolicyParams, scenarios: usize, seed: u64) -> Result<Vec<TrainRecord>> {
    records_of(Driver::Policy(params), h, scenarios, seed)
}

/// Hook applied to every dataset before training (e.g. augmentation).
pub type DatasetHook<'a> = &'a dyn Fn(&mut Vec<TrainRecord>) -> Result<()>;

/// Behavior cloning with optional DAgger rounds. Returns the policy and the
/// final aggregated dataset (after `hook`).
pub fn fit_policy(
    h: &Harness,
    collect: &CollectConfig,
    train_cfg: &TrainConfig,
    hidden: usize,
    hook: Option<DatasetHook<'_>>,
) -> Result<(PolicyParams, Vec<TrainRecord>)> {
    let mut data = collect_teacher_data(h, collect)?;
    if let Some(f) = hook {
        f(&mut data)?;
    }
    let init = PolicyParams::seeded(h.policy_config(hidden), rng::derive(train_cfg.seed, 0x1417));
    let mut params = train(&data, init.clone(), train_cfg)?.params;
    for round in 0..collect.dagger_rounds {
        let seed = rng::derive(collect.seed, 0xDA66 + round as u64);
        let mut extra = collect_policy_data(h, &params, collect.dagger_scenarios, seed)?;
        if let Some(f) = hook {
            f(&mut extra)?;
        }
        data.extend(extra);
        params = train(&data, init.clone(), train_cfg)?.params;
    }
    Ok((params, data))
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Evaluates `params` with an optional substitution stage.
pub fn evaluate_policy(
    h: &Harness,
    params: &PolicyParams,
    substitution: Option<(&ConceptBank, &SubstitutionRule)>,
    trials: usize,
    seed: u64,
) -> Result<Evaluation> {
    let pipeline = FeaturePipeline { substitution, ..h.pipeline(rng::derive(seed, 0x0B5)) };
    evaluate(Driver::Policy(params), &h.family, trials, seed, &h.sim, &pipeline)
}

/// Trial `i` of [`evaluate_policy`] replayed with observations recorded.
pub fn replay_trial(
    h: &Harness,
    params: &PolicyParams,
    substitution: Option<(&ConceptBank, &SubstitutionRule)>,
    seed: u64,
    trial: usize,
) -> Result<RolloutRecord> {
    let base = h.pipeline(rng::derive(seed, 0x0B5));
    let pipeline = FeaturePipeline { substitution, seed: rng::derive(base.seed, trial as u64), ..base };
    let scenario = h.family.generate(seed, trial as u64);
    rollout(Driver::Policy(params), &scenario, &h.sim, &pipeline, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    /// Cells replaced on the fixed reference set of baseline observations.
    pub replaced_cells: usize,
}

/// Reference observations: the first `scenarios` baseline policy rollouts.
fn reference_maps(h: &Harness, params: &PolicyParams, scenarios: usize, seed: u64) -> Result<Vec<FeatureMap>> {
    Ok(collect_policy_data(h, params, scenarios, seed)?.into_iter().map(|r| r.features).collect())
}

/// Closed-loop performance when image features at or above each threshold
/// are replaced by their matched text features.
pub fn sweep_threshold(
    h: &Harness,
    params: &PolicyParams,
    thresholds: &[f64],
    similarity: Similarity,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let reference = reference_maps(h, params, 2, seed)?;
    thresholds
        .iter()
        .map(|&threshold| {
            let rule = SubstitutionRule::cross_modality(threshold, similarity);
            let eval = if threshold == f64::INFINITY {
                evaluate_policy(h, params, None, trials, seed)?
            } else {
                evaluate_policy(h, params, Some((&h.bank, &rule)), trials, seed)?
            };
            let (mean, std) = mean_std(&eval.per_trial);
            let mut replaced_cells = 0;
            for (k, map) in reference.iter().enumerate() {
                replaced_cells += substitute(map, &h.bank, &rule, k as u64)?.1.len();
            }
            Ok(SweepRow { threshold, mean, std, trials, replaced_cells })
        })
        .collect()
}

/// A named set of concepts used as the only match candidates, and the
/// similarity a match needs before its cell is replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSubset {
    pub name: String,
    pub concepts: Vec<String>,
    pub threshold: f64,
}

impl ConceptSubset {
    /// Every cell is replaced by its nearest subset concept.
    pub fn nearest<S: AsRef<str>>(name: &str, concepts: &[S]) -> Self {
        Self {
            name: name.to_string(),
            concepts: concepts.iter().map(|c| c.as_ref().to_string()).collect(),
            threshold: f64::NEG_INFINITY,
        }
    }

    /// Whether evaluation reduces to the unmodified baseline: no candidates,
    /// or a threshold no match can reach.
    pub fn is_identity(&self) -> bool {
        self.concepts.is_empty() || self.threshold == f64::INFINITY
    }

    /// The bank restricted to this subset and the rule that replaces cells
    /// by their matched concept. `None` for identity subsets.
    pub fn substitution(&self, bank: &ConceptBank, similarity: Similarity) -> Result<Option<(ConceptBank, SubstitutionRule)>> {
        let unknown: Vec<&str> = self.concepts.iter().filter(|c| bank.get(c).is_none()).map(String::as_str).collect();
        if !unknown.is_empty() {
            bail!(Validation, "subset '{}' names unknown concepts: {}", self.name, unknown.join(", "));
        }
        if self.threshold.is_nan() {
            bail!(Config, "subset '{}' has a NaN threshold", self.name);
        }
        if self.is_identity() {
            return Ok(None);
        }
        let restricted = bank.with_roles::<String>(&self.concepts, &[])?;
        Ok(Some((restricted, SubstitutionRule::cross_modality(self.threshold, similarity))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebugRow {
    pub subset: ConceptSubset,
    pub evaluation: Evaluation,
}

/// Closed-loop performance when cells matching a subset concept are replaced
/// by that concept's text feature.
pub fn evaluate_subset(
    h: &Harness,
    params: &PolicyParams,
    subset: &ConceptSubset,
    similarity: Similarity,
    trials: usize,
    seed: u64,
) -> Result<Evaluation> {
    match subset.substitution(&h.bank, similarity)? {
        None => evaluate_policy(h, params, None, trials, seed),
        Some((bank, rule)) => evaluate_policy(h, params, Some((&bank, &rule)), trials, seed),
    }
}

/// Rejects duplicate subset names, unknown concepts and NaN thresholds.
pub fn check_subsets(bank: &ConceptBank, subsets: &[ConceptSubset], similarity: Similarity) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in subsets {
        if !seen.insert(s.name.as_str()) {
            bail!(Validation, "duplicate subset name '{}'", s.name);
        }
        s.substitution(bank, similarity)?;
    }
    Ok(())
}

/// Evaluates every subset (see [`evaluate_subset`]). Subset names must be
/// unique; an empty subset is the unmodified baseline.
pub fn debug_concepts(
    h: &Harness,
    params: &PolicyParams,
    subsets: &[ConceptSubset],
    similarity: Similarity,
    trials: usize,
    seed: u64,
) -> Result<Vec<DebugRow>> {
    check_subsets(&h.bank, subsets, similarity)?;
    subsets
        .iter()
        .map(|s| Ok(DebugRow { subset: s.clone(), evaluation: evaluate_subset(h, params, s, similarity, trials, seed)? }))
        .collect()
}

/// One augmented cell of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCell {
    pub sample: usize,
    pub swap: SwapRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentReport {
    pub baseline: PolicyParams,
    pub augmented: PolicyParams,
    pub baseline_eval: Evaluation,
    pub augmented_eval: Evaluation,
    pub cells: Vec<AugmentedCell>,
}

/// Trains an unaugmented and an augmented policy on the same demonstrations
/// (same initialization and batch order) and evaluates both on `ood`.
/// `bank` carries the augmentation roles and must contain `h.bank`'s
/// concepts; `rule` is applied to every training sample.
pub fn augment_train(
    h: &Harness,
    ood: &ScenarioFamily,
    bank: &ConceptBank,
    rule: &SubstitutionRule,
    collect: &CollectConfig,
    train_cfg: &TrainConfig,
    hidden: usize,
    trials: usize,
    seed: u64,
) -> Result<AugmentReport> {
    rule.validate(bank)?;
    let cells = core::cell::RefCell::new(Vec::new());
    let counter = core::cell::Cell::new(0usize);
    let hook = |data: &mut Vec<TrainRecord>| -> Result<()> {
        let maps: Vec<FeatureMap> = data.iter().map(|r| r.features.clone()).collect();
        let base = counter.get();
        let aug = augment_dataset(&maps, bank, rule, rng::derive(seed, base as u64))?;
        for (rec, sample) in data.iter_mut().zip(aug) {
            rec.features = sample.map;
            let index = base + sample.index;
            cells.borrow_mut().extend(sample.swaps.into_iter().map(|swap| AugmentedCell { sample: index, swap }));
        }
        counter.set(base + data.len());
        Ok(())
    };
    let (baseline, _) = fit_policy(h, collect, train_cfg, hidden, None)?;
    let (augmented, _) = fit_policy(h, collect, train_cfg, hidden, Some(&hook))?;
    let eval_h = h.with_family(ood.clone());
    let baseline_eval = evaluate_policy(&eval_h, &baseline, None, trials, seed)?;
    let augmented_eval = evaluate_policy(&eval_h, &augmented, None, trials, seed)?;
    Ok(AugmentReport { baseline, augmented, baseline_eval, augmented_eval, cells: cells.into_inner() })
}

/// A unit vector at cosine `cos` from `base`'s vector, in a seeded random
/// direction orthogonal to it.
pub fn nearby_concept(bank: &ConceptBank, base: &str, cos: f64, seed: u64) -> Result<Vec<f64>> {
    let Some(v) = bank.get(base) else {
        bail!(Validation, "unknown concept '{base}'");
    };
    if !(-1.0..=1.0).contains(&cos) {
        bail!(Config, "cosine {cos} outside [-1, 1]");
    }
    let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let mut r = rng::stream(seed, &[0x4EA2]);
    let mut u: Vec<f64> = (0..v.len()).map(|_| rng::normal(&mut r)).collect();
    let along: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    u.iter_mut().zip(&v).for_each(|(a, b)| *a -= along * b);
    let n = libm::sqrt(u.iter().map(|a| a * a).sum::<f64>());
    let sin = libm::sqrt(1.0 - cos * cos);
    Ok(v.iter().zip(&u).map(|(b, a)| cos * b + sin * a / n).collect())
}

/// A bank of mutually orthogonal basis vectors, one per name (all sources).
pub fn one_hot_bank<S: AsRef<str>>(names: &[S]) -> Result<ConceptBank> {
    let n = names.len();
    let entries = names.iter().enumerate().map(|(i, name)| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        (name.as_ref().to_string(), v)
    });
    ConceptBank::new(entries, names, &[])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyConfig {
    pub k: usize,
    pub train_rollouts: usize,
    pub test_rollouts: usize,
    /// Cells sampled (uniformly, seeded) from training rollouts for k-means.
    pub kmeans_cells: usize,
    pub kmeans_iter: usize,
    pub svc: SvcConfig,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            k: 4,
            train_rollouts: 10,
            test_rollouts: 90,
            kmeans_cells: 4000,
            kmeans_iter: 100,
            svc: SvcConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub model: ClusterModel,
    pub classifier: LinearClassifier,
    pub anchors: Vec<String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Per-class test recall, indexed by [`Maneuver::index`].
    pub class_accuracy: Vec<Option<f64>>,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Clusters cell features from training rollouts, projects every step onto
/// center distances, and fits a one-vs-rest maneuver classifier; rollouts
/// `0..train` train, the next `test` evaluate.
pub fn classify(h: &Harness, driver: Driver<'_>, cfg: &ClassifyConfig) -> Result<ClassifyReport> {
    if cfg.train_rollouts == 0 || cfg.test_rollouts == 0 {
        bail!(Config, "classification needs training and test rollouts");
    }
    let mut steps = Vec::new();
    for i in 0..cfg.train_rollouts + cfg.test_rollouts {
        let scenario = h.family.generate(cfg.seed, i as u64);
        let rec = rollout(driver, &scenario, &h.sim, &h.pipeline(rng::derive(cfg.seed ^ 0xC1A5, i as u64)), true)?;
        let split = i < cfg.train_rollouts;
        steps.extend(rec.steps.into_iter().map(|s| (split, s.features.expect("features recorded"), s.label)));
    }
    let dim = h.bank.dim();
    let train_cells: Vec<&[f32]> =
        steps.iter().filter(|s| s.0).flat_map(|s| s.1.as_slice().chunks(dim)).collect();
    let mut r = rng::stream(cfg.seed, &[0xC1F]);
    let mut pts = Vec::with_capacity(cfg.kmeans_cells.min(train_cells.len()) * dim);
    if train_cells.len() <= cfg.kmeans_cells {
        train_cells.iter().for_each(|c| pts.extend(c.iter().map(|&x| f64::from(x))));
    } else {
        use rand::seq::index::sample;
        let mut picks = sample(&mut r, train_cells.len(), cfg.kmeans_cells).into_vec();
        picks.sort_unstable();
        picks.iter().for_each(|&i| pts.extend(train_cells[i].iter().map(|&x| f64::from(x))));
    }
    let model = kmeans(&pts, dim, cfg.k, cfg.seed, cfg.kmeans_iter)?;
    let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (split, f, label) in &steps {
        let x = project_grid(f.as_slice(), &model)?;
        if *split {
            xtr.push(x);
            ytr.push(label.index());
        } else {
            xte.push(x);
            yte.push(label.index());
        }
    }
    let classifier = train_linear_svc(&xtr, &ytr, Maneuver::ALL.len(), &cfg.svc)?;
    let anchors = anchor_clusters(&model, &h.bank, Similarity::Cosine)?;
    Ok(ClassifyReport {
        train_accuracy: classifier.accuracy(&xtr, &ytr),
        test_accuracy: classifier.accuracy(&xte, &yte),
        class_accuracy: classifier.class_accuracy(&xte, &yte),
        train_samples: xtr.len(),
        test_samples: xte.len(),
        model,
        classifier,
        anchors,
    })
}
