// SPDX-License-Identifier: MIT OR Apache-2.0

use conceptdrive_core::concept::{synth_bank, Similarity, SubstitutionRule};
use conceptdrive_core::experiment::{
    augment_train, classify, debug_concepts, fit_policy, nearby_concept, one_hot_bank, replay_trial, sweep_threshold,
    ClassifyConfig, CollectConfig, ConceptSubset, Harness,
};
use conceptdrive_core::policy::TrainConfig;
use conceptdrive_core::sim::{Driver, ScenarioFamily, SimConfig};

const NAMES: [&str; 6] = ["road", "lane marking", "sky", "tree", "car", "house"];

fn harness() -> Harness {
    let bank = synth_bank(&NAMES, 7, 8, &NAMES, &[]).unwrap();
    Harness { family: ScenarioFamily::default(), sim: SimConfig::default(), bank, feature_sigma: 0.1 }
}

fn quick() -> (CollectConfig, TrainConfig) {
    (
        CollectConfig { scenarios: 3, dagger_rounds: 0, ..Default::default() },
        TrainConfig { epochs: 2, ..Default::default() },
    )
}

#[test]
fn sweep_rows_and_counts() {
    let h = harness();
    let (c, t) = quick();
    let (p, _) = fit_policy(&h, &c, &t, 8, None).unwrap();
    let th = [f64::INFINITY, 0.99, 0.9, 0.5, f64::NEG_INFINITY];
    let rows = sweep_threshold(&h, &p, &th, Similarity::Cosine, 3, 1).unwrap();
    let base = conceptdrive_core::experiment::evaluate_policy(&h, &p, None, 3, 1).unwrap();
    assert_eq!(rows[0].mean, base.mean_soft_success);
    assert_eq!(rows[0].replaced_cells, 0);
    for w in rows.windows(2) {
        assert!(w[1].replaced_cells >= w[0].replaced_cells);
    }
}

#[test]
fn debug_concepts_validates_subsets() {
    let h = harness();
    let (c, t) = quick();
    let (p, _) = fit_policy(&h, &c, &t, 8, None).unwrap();
    let s = |n: &str, v: &[&str]| ConceptSubset::nearest(n, v);
    let err = debug_concepts(&h, &p, &[s("a", &[]), s("a", &["road"])], Similarity::Cosine, 2, 0).unwrap_err();
    assert!(err.to_string().contains("duplicate"));
    let err = debug_concepts(&h, &p, &[s("a", &["road", "zebra"])], Similarity::Cosine, 2, 0).unwrap_err();
    assert!(err.to_string().contains("zebra"));
    let rows = debug_concepts(&h, &p, &[s("base", &[]), s("all", &NAMES)], Similarity::Cosine, 2, 0).unwrap();
    let base = conceptdrive_core::experiment::evaluate_policy(&h, &p, None, 2, 0).unwrap();
    assert_eq!(rows[0].evaluation, base);
    let unreachable = ConceptSubset { threshold: f64::INFINITY, ..s("inf", &NAMES) };
    let rows = debug_concepts(&h, &p, &[unreachable], Similarity::Cosine, 2, 0).unwrap();
    assert_eq!(rows[0].evaluation, base);
}

#[test]
fn replayed_trials_match_the_evaluation() {
    let h = harness();
    let (c, t) = quick();
    let (p, _) = fit_policy(&h, &c, &t, 8, None).unwrap();
    let subset = ConceptSubset::nearest("coarse", &["road", "sky"]);
    let (bank, rule) = subset.substitution(&h.bank, Similarity::Cosine).unwrap().unwrap();
    let eval = conceptdrive_core::experiment::evaluate_policy(&h, &p, Some((&bank, &rule)), 3, 4).unwrap();
    for i in 0..3 {
        let rec = replay_trial(&h, &p, Some((&bank, &rule)), 4, i).unwrap();
        assert_eq!(rec.soft_success, eval.per_trial[i]);
        assert!(rec.steps.iter().all(|s| s.features.is_some()));
    }
}

#[test]
fn zero_swap_probability_trains_identical_policies() {
    let h = harness();
    let (c, t) = quick();
    let bank = h.bank.with_roles(&["tree"], &["house"]).unwrap();
    let rule = SubstitutionRule { swap_probability: 0.0, ..Default::default() };
    let mut ood = h.family.clone();
    ood.offroad_concepts = vec!["house".into()];
    let r = augment_train(&h, &ood, &bank, &rule, &c, &t, 8, 3, 5).unwrap();
    assert_eq!(r.baseline, r.augmented);
    assert_eq!(r.baseline_eval, r.augmented_eval);
    assert!(r.cells.is_empty());
    let rule = SubstitutionRule { swap_probability: 1.0, ..Default::default() };
    let r = augment_train(&h, &ood, &bank, &rule, &c, &t, 8, 3, 5).unwrap();
    assert!(!r.cells.is_empty());
    assert!(r.cells.iter().all(|c| c.swap.matched.name == "tree" && c.swap.replacement == "house"));
}

#[test]
fn classification_is_reproducible() {
    let h = harness();
    let cfg = ClassifyConfig { train_rollouts: 2, test_rollouts: 3, kmeans_cells: 500, ..Default::default() };
    let a = classify(&h, Driver::Teacher, &cfg).unwrap();
    assert_eq!(a, classify(&h, Driver::Teacher, &cfg).unwrap());
    assert_eq!(a.anchors.len(), 4);
    assert!(a.test_accuracy > 0.0);
}

#[test]
fn helper_banks() {
    let h = harness();
    let v = nearby_concept(&h.bank, "car", 0.9, 3).unwrap();
    let car: Vec<f64> = h.bank.get("car").unwrap().iter().map(|&x| f64::from(x)).collect();
    let cos: f64 = v.iter().zip(&car).map(|(a, b)| a * b).sum();
    assert!((cos - 0.9).abs() < 1e-6);
    let oh = one_hot_bank(&NAMES).unwrap();
    assert_eq!(oh.dim(), 6);
    assert_eq!(Similarity::Dot.score(oh.get("road").unwrap(), oh.get("sky").unwrap()), 0.0);
}
