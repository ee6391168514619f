// SPDX-License-Identifier: MIT OR Apache-2.0

use conceptdrive_core::analysis::{anchor_clusters, ClusterModel};
use conceptdrive_core::concept::{
    match_any, match_concept, substitute, synth_bank, synth_text_encode, ConceptBank, Replacement, Similarity,
    SubstitutionRule,
};
use conceptdrive_core::rng;
use conceptdrive_core::sim::embed_scene;
use conceptdrive_core::FeatureMap;
use proptest::prelude::*;
use std::collections::BTreeMap;

const NAMES: [&str; 8] = ["road", "lane marking", "sky", "tree", "car", "house", "shop", "building"];

fn bank() -> ConceptBank {
    synth_bank(&NAMES, 3, 32, &NAMES[..5], &NAMES[5..]).unwrap()
}

fn noisy_map(bank: &ConceptBank, cells: usize, sigma: f64, seed: u64) -> FeatureMap {
    let names: Vec<&str> = (0..cells).map(|j| NAMES[(rng::derive(seed, j as u64) % 8) as usize]).collect();
    embed_scene(&names, 1, cells, bank, sigma, seed).unwrap()
}

#[test]
fn cosine_of_a_bank_vector_with_itself_is_one() {
    let b = bank();
    for name in NAMES {
        assert_eq!(Similarity::Cosine.score(b.get(name).unwrap(), b.get(name).unwrap()), 1.0);
    }
}

#[test]
fn equal_similarity_ties_go_to_the_smaller_name() {
    let b = bank();
    let (a, c) = (b.get("car").unwrap(), b.get("road").unwrap());
    let mid: Vec<f32> = a.iter().zip(c).map(|(x, y)| (x + y) / 2.0).collect();
    // exact tie only if both dot products agree; the f32 midpoint may not
    // give that, so build a tie by construction on a two-concept bank
    let two = ConceptBank::new(
        vec![("zeta".to_string(), vec![1.0, 0.0]), ("alpha".to_string(), vec![0.0, 1.0])],
        &["zeta", "alpha"],
        &[],
    )
    .unwrap();
    assert_eq!(match_concept(&[0.5, 0.5], &two, Similarity::Cosine).unwrap().name, "alpha");
    assert_eq!(match_any(&[0.5, 0.5], &two, Similarity::Dot).unwrap().name, "alpha");
    let m = match_any(&mid, &b, Similarity::Cosine).unwrap();
    assert!(m.name == "car" || m.name == "road");
}

#[test]
fn synthetic_encodings_rarely_align() {
    // per-pair rate of |cos| > 0.5 among independent 32-d directions is about 0.4%
    let names: Vec<String> = (0..100).map(|i| format!("concept {i}")).collect();
    let v: Vec<Vec<f32>> = names.iter().map(|n| synth_text_encode(n, 0, 32)).collect();
    let mut big = 0;
    let mut pairs = 0;
    for i in 0..v.len() {
        for j in 0..i {
            pairs += 1;
            if Similarity::Dot.score(&v[i], &v[j]).abs() >= 0.5 {
                big += 1;
            }
        }
    }
    assert!((big as f64 / pairs as f64) < 0.01, "{big} of {pairs}");
}

#[test]
#[ignore = "not attainable with independent random directions: about 18 of 4950 pairs exceed 0.5 in 32 dimensions"]
fn synthetic_encodings_are_pairwise_below_half() {
    let names: Vec<String> = (0..100).map(|i| format!("concept {i}")).collect();
    let v: Vec<Vec<f32>> = names.iter().map(|n| synth_text_encode(n, 0, 32)).collect();
    for i in 0..v.len() {
        for j in 0..i {
            assert!(Similarity::Dot.score(&v[i], &v[j]).abs() < 0.5, "{} vs {}", names[i], names[j]);
        }
    }
}

#[test]
fn noisy_cells_recover_their_concept() {
    let b = synth_bank(&NAMES, 3, 32, &NAMES, &[]).unwrap();
    let mut hits = 0;
    let total = 1000;
    for t in 0..total / 50 {
        let names: Vec<&str> = (0..50).map(|j| NAMES[(rng::derive(t, j) % 8) as usize]).collect();
        let map = embed_scene(&names, 5, 10, &b, 0.05, 1000 + t).unwrap();
        for (j, name) in names.iter().enumerate() {
            if match_concept(map.cell(j), &b, Similarity::Cosine).unwrap().name == *name {
                hits += 1;
            }
        }
    }
    assert!(hits as f64 / total as f64 >= 0.99, "{hits}/{total}");
}

#[test]
fn perturbed_centers_anchor_to_their_concept() {
    let b = synth_bank(&NAMES, 3, 32, &NAMES, &[]).unwrap();
    let mut hits = 0;
    for t in 0..1000u64 {
        let name = NAMES[(t % 8) as usize];
        let mut r = rng::stream(77, &[t]);
        let centers: Vec<f64> = b.get(name).unwrap().iter().map(|&x| f64::from(x) + 0.05 * rng::normal(&mut r)).collect();
        let other: Vec<f64> = b.get(NAMES[((t + 1) % 8) as usize]).unwrap().iter().map(|&x| f64::from(x)).collect();
        let model = ClusterModel { dim: 32, centers: [centers, other].concat(), inertia: 0.0, inertia_history: vec![], iterations: 0 };
        if anchor_clusters(&model, &b, Similarity::Cosine).unwrap()[0] == name {
            hits += 1;
        }
    }
    assert!(hits >= 990, "{hits}/1000");
}

#[test]
fn bank_centers_anchor_to_themselves() {
    let b = synth_bank(&NAMES, 3, 32, &NAMES, &[]).unwrap();
    let centers: Vec<f64> = NAMES.iter().flat_map(|n| b.get(n).unwrap().iter().map(|&x| f64::from(x))).collect();
    let model = ClusterModel { dim: 32, centers, inertia: 0.0, inertia_history: vec![], iterations: 0 };
    assert_eq!(anchor_clusters(&model, &b, Similarity::Cosine).unwrap(), NAMES.to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replacement_count_is_monotone_in_threshold(seed in 0u64..1000, a in -1.0f64..1.0, b in -1.0f64..1.0, sigma in 0.0f64..0.5) {
        let bk = bank();
        let map = noisy_map(&bk, 24, sigma, seed);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let n_lo = substitute(&map, &bk, &SubstitutionRule::cross_modality(lo, Similarity::Cosine), seed).unwrap().1.len();
        let n_hi = substitute(&map, &bk, &SubstitutionRule::cross_modality(hi, Similarity::Cosine), seed).unwrap().1.len();
        prop_assert!(n_hi <= n_lo);
    }

    #[test]
    fn cells_are_kept_or_become_targets(seed in 0u64..1000, threshold in -1.0f64..1.0, p in 0.0f64..=1.0, sigma in 0.0f64..0.5) {
        let bk = bank();
        let map = noisy_map(&bk, 24, sigma, seed);
        let rule = SubstitutionRule { threshold, swap_probability: p, ..Default::default() };
        let (out, swaps) = substitute(&map, &bk, &rule, seed).unwrap();
        let swapped: Vec<usize> = swaps.iter().map(|s| s.matched.cell).collect();
        for j in 0..map.cells() {
            if swapped.contains(&j) {
                prop_assert!(bk.targets().iter().any(|t| bk.get(t).unwrap() == out.cell(j)));
            } else {
                prop_assert_eq!(out.cell(j), map.cell(j));
            }
        }
        for s in &swaps {
            prop_assert!(s.matched.score >= threshold);
        }
    }

    #[test]
    fn cell_decisions_do_not_depend_on_other_cells(seed in 0u64..1000, k in 0usize..24) {
        let bk = bank();
        let map = noisy_map(&bk, 24, 0.2, seed);
        let mut changed = map.clone();
        changed.cell_mut(k).copy_from_slice(bk.get("sky").unwrap());
        let rule = SubstitutionRule { threshold: 0.3, swap_probability: 0.5, ..Default::default() };
        let (a, _) = substitute(&map, &bk, &rule, seed).unwrap();
        let (b, _) = substitute(&changed, &bk, &rule, seed).unwrap();
        for j in (0..24).filter(|&j| j != k) {
            prop_assert_eq!(a.cell(j), b.cell(j));
        }
    }

    #[test]
    fn infinite_thresholds(seed in 0u64..1000, sigma in 0.0f64..1.0) {
        let bk = bank();
        let map = noisy_map(&bk, 16, sigma, seed);
        let (same, swaps) = substitute(&map, &bk, &SubstitutionRule::cross_modality(f64::INFINITY, Similarity::Cosine), seed).unwrap();
        prop_assert_eq!(&same, &map);
        prop_assert!(swaps.is_empty());
        let (all, swaps) = substitute(&map, &bk, &SubstitutionRule::cross_modality(f64::NEG_INFINITY, Similarity::Cosine), seed).unwrap();
        prop_assert_eq!(swaps.len(), 16);
        for j in 0..16 {
            let m = match_concept(map.cell(j), &bk, Similarity::Cosine).unwrap();
            prop_assert_eq!(all.cell(j), bk.get(&m.name).unwrap());
        }
    }

    #[test]
    fn map_replacement_honors_its_rows(seed in 0u64..1000) {
        let bk = synth_bank(&NAMES, 3, 32, &["tree"], &["house", "shop", "building"]).unwrap();
        let mut rows = BTreeMap::new();
        rows.insert("tree".to_string(), vec![("house".to_string(), 1.0), ("shop".to_string(), 3.0)]);
        let rule = SubstitutionRule { threshold: 0.5, replacement: Replacement::from_weights(rows).unwrap(), ..Default::default() };
        let names = ["tree"; 12];
        let map = embed_scene(&names, 3, 4, &bk, 0.05, seed).unwrap();
        let (_, swaps) = substitute(&map, &bk, &rule, seed).unwrap();
        prop_assert_eq!(swaps.len(), 12);
        prop_assert!(swaps.iter().all(|s| s.replacement == "house" || s.replacement == "shop"));
    }
}
