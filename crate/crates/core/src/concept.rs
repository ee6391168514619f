// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept banks and latent-space substitution.
//!
//! A patch feature is matched against the bank's source concepts; when the
//! best similarity clears the rule's threshold (and a per-cell coin flip
//! succeeds) the whole cell vector is overwritten by a target concept vector
//! chosen through the replacement map.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::feature::FeatureMap;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub name: String,
    /// Unit-norm embedding.
    pub vector: Vec<f32>,
}

/// Named unit vectors with source (matchable) and target (replacement) roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    dim: usize,
    entries: Vec<Concept>,
    src: BTreeSet<String>,
    tgt: BTreeSet<String>,
}

fn normalized(name: &str, v: &[f64]) -> Result<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        bail!(Validation, "concept '{name}' has non-finite components");
    }
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n == 0.0 {
        bail!(Validation, "concept '{name}' has a zero vector");
    }
    Ok(v.iter().map(|x| (x / n) as f32).collect())
}

impl ConceptBank {
    /// Builds a bank; vectors are renormalized to unit length.
    pub fn new<I, S>(entries: I, src: &[S], tgt: &[S]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut out: Vec<Concept> = Vec::new();
        let mut names = BTreeSet::new();
        let mut dim = None;
        for (name, v) in entries {
            if name.is_empty() {
                bail!(Validation, "concept with an empty name");
            }
            if !names.insert(name.clone()) {
                bail!(Validation, "duplicate concept name '{name}'");
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => bail!(Dimension, "concept '{name}' has dimension {}, bank has {d}", v.len()),
                _ => {}
            }
            let vector = normalized(&name, &v)?;
            out.push(Concept { name, vector });
        }
        let Some(dim) = dim else {
            bail!(Validation, "empty concept bank");
        };
        if dim == 0 {
            bail!(Dimension, "concept vectors are empty");
        }
        let mut bank = Self { dim, entries: out, src: BTreeSet::new(), tgt: BTreeSet::new() };
        bank.set_roles(src, tgt)?;
        Ok(bank)
    }

    fn set_roles<S: AsRef<str>>(&mut self, src: &[S], tgt: &[S]) -> Result<()> {
        let unknown: Vec<&str> = src
            .iter()
            .chain(tgt)
            .map(AsRef::as_ref)
            .filter(|n| self.get(n).is_none())
            .collect();
        if !unknown.is_empty() {
            bail!(Validation, "roles reference unknown concepts: {}", unknown.join(", "));
        }
        self.src = src.iter().map(|s| s.as_ref().to_string()).collect();
        self.tgt = tgt.iter().map(|s| s.as_ref().to_string()).collect();
        Ok(())
    }

    /// The same vectors under different source/target roles.
    pub fn with_roles<S: AsRef<str>>(&self, src: &[S], tgt: &[S]) -> Result<Self> {
        let mut b = self.clone();
        b.set_roles(src, tgt)?;
        Ok(b)
    }

    /// Adds or replaces concepts (roles unchanged).
    pub fn extended<I>(&self, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut b = self.clone();
        for (name, v) in entries {
            if v.len() != self.dim {
                bail!(Dimension, "concept '{name}' has dimension {}, bank has {}", v.len(), self.dim);
            }
            let vector = normalized(&name, &v)?;
            match b.entries.iter_mut().find(|c| c.name == name) {
                Some(c) => c.vector = vector,
                None => b.entries.push(Concept { name, vector }),
            }
        }
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Concept] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|c| c.name == name).map(|c| c.vector.as_slice())
    }

    pub fn sources(&self) -> &BTreeSet<String> {
        &self.src
    }

    pub fn targets(&self) -> &BTreeSet<String> {
        &self.tgt
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.name.as_str())
    }
}

/// Deterministic stand-in for a text encoder: a seeded Gaussian direction
/// keyed by the name, normalized to unit length.
pub fn synth_text_encode(name: &str, seed: u64, dim: usize) -> Vec<f32> {
    let mut r = rng::stream(seed, &[0x7E47, rng::fnv1a(name.as_bytes()), dim as u64]);
    let v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
    normalized(name, &v).expect("a Gaussian draw is non-zero")
}

/// A bank of synthetic encodings for `names`.
pub fn synth_bank<S: AsRef<str>>(names: &[S], seed: u64, dim: usize, src: &[S], tgt: &[S]) -> Result<ConceptBank> {
    let entries = names.iter().map(|n| {
        let v = synth_text_encode(n.as_ref(), seed, dim);
        (n.as_ref().to_string(), v.iter().map(|&x| f64::from(x)).collect())
    });
    ConceptBank::new(entries, src, tgt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    Dot,
    #[default]
    Cosine,
}

impl Similarity {
    pub fn name(self) -> &'static str {
        match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" => Ok(Similarity::Cosine),
            other => bail!(Config, "unknown similarity '{other}'"),
        }
    }

    /// `g(a, b)`. Cosine of a zero vector is 0.
    pub fn score(self, a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
        match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let na: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                let nb: f64 = b.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                let denom = libm::sqrt(na * nb);
                if denom == 0.0 {
                    0.0
                } else {
                    dot / denom
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub cell: usize,
    pub name: String,
    pub score: f64,
}

fn best_match<'a>(f: &[f32], bank: &'a ConceptBank, names: &'a BTreeSet<String>, kind: Similarity) -> Result<(&'a str, f64)> {
    if f.len() != bank.dim {
        bail!(Dimension, "feature of dimension {} against bank of dimension {}", f.len(), bank.dim);
    }
    let mut best: Option<(&str, f64)> = None;
    // BTreeSet iterates in name order, so keeping only strict improvements
    // resolves ties to the lexicographically smallest name.
    for name in names {
        let v = bank.get(name).expect("role names are validated");
        let s = kind.score(f, v);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((name.as_str(), s));
        }
    }
    match best {
        Some(b) => Ok(b),
        None => bail!(Config, "no concepts to match against"),
    }
}

/// Best source-role match for `f`.
pub fn match_concept(f: &[f32], bank: &ConceptBank, kind: Similarity) -> Result<MatchResult> {
    if bank.src.is_empty() {
        bail!(Config, "concept bank has no source concepts");
    }
    let (name, score) = best_match(f, bank, &bank.src, kind)?;
    Ok(MatchResult { cell: 0, name: name.into(), score })
}

/// Best match over every concept in the bank, regardless of role.
pub fn match_any(f: &[f32], bank: &ConceptBank, kind: Similarity) -> Result<MatchResult> {
    let all: BTreeSet<String> = bank.names().map(String::from).collect();
    let (name, score) = best_match(f, bank, &all, kind)?;
    Ok(MatchResult { cell: 0, name: name.into(), score })
}

/// Per-cell source matches of a feature map.
pub fn match_cells(map: &FeatureMap, bank: &ConceptBank, kind: Similarity) -> Result<Vec<MatchResult>> {
    (0..map.cells())
        .map(|j| {
            let mut m = match_concept(map.cell(j), bank, kind)?;
            m.cell = j;
            Ok(m)
        })
        .collect()
}

/// The replacement function `h`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Replacement {
    /// Replace a cell by the text vector of the concept it matched.
    IdentityToMatched,
    /// Any target concept, uniformly.
    #[default]
    UniformTargets,
    /// Source name → weighted target names; each row sums to 1.
    Map(BTreeMap<String, Vec<(String, f64)>>),
}

impl Replacement {
    /// Builds a map from non-negative weights, normalizing every row.
    pub fn from_weights(rows: BTreeMap<String, Vec<(String, f64)>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (src, row) in rows {
            if row.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
                bail!(Rule, "replacement row '{src}' has a negative or non-finite weight");
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            if !(total > 0.0) {
                bail!(Rule, "replacement row '{src}' has zero total weight");
            }
            out.insert(src, row.into_iter().map(|(t, w)| (t, w / total)).collect());
        }
        Ok(Replacement::Map(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionRule {
    pub similarity: Similarity,
    /// A match is accepted iff its score is `>= threshold`; may be infinite.
    pub threshold: f64,
    pub swap_probability: f64,
    pub replacement: Replacement,
}

impl Default for SubstitutionRule {
    fn default() -> Self {
        Self {
            similarity: Similarity::Cosine,
            threshold: 0.5,
            swap_probability: 1.0,
            replacement: Replacement::UniformTargets,
        }
    }
}

impl SubstitutionRule {
    /// Replace every match at or above `threshold` by its own text vector.
    pub fn cross_modality(threshold: f64, similarity: Similarity) -> Self {
        Self { similarity, threshold, swap_probability: 1.0, replacement: Replacement::IdentityToMatched }
    }

    pub fn validate(&self, bank: &ConceptBank) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_probability) {
            bail!(Rule, "swap probability {} outside [0, 1]", self.swap_probability);
        }
        if self.threshold.is_nan() {
            bail!(Rule, "threshold is NaN");
        }
        match &self.replacement {
            Replacement::IdentityToMatched => {}
            Replacement::UniformTargets => {
                if bank.tgt.is_empty() {
                    bail!(Rule, "uniform replacement needs at least one target concept");
                }
            }
            Replacement::Map(rows) => {
                for (src, row) in rows {
                    if !bank.src.contains(src) {
                        bail!(Rule, "replacement source '{src}' is not a source concept");
                    }
                    if let Some((t, _)) = row.iter().find(|(t, _)| !bank.tgt.contains(t)) {
                        bail!(Rule, "replacement target '{t}' (from '{src}') is not a target concept");
                    }
                    let total: f64 = row.iter().map(|(_, w)| w).sum();
                    if (total - 1.0).abs() > 1e-9 || row.iter().any(|(_, w)| *w < 0.0) {
                        bail!(Rule, "replacement row '{src}' does not sum to 1");
                    }
                }
            }
        }
        Ok(())
    }
}

/// One replaced cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapRecord {
    pub matched: MatchResult,
    pub replacement: String,
}

fn sample_row<'a>(row: &'a [(String, f64)], u: f64) -> &'a str {
    let mut acc = 0.0;
    for (name, w) in row {
        acc += w;
        if u < acc {
            return name;
        }
    }
    // rounding in the cumulative sum: fall back to the last positive entry
    row.iter().rev().find(|(_, w)| *w > 0.0).map(|(n, _)| n.as_str()).unwrap_or(row[0].0.as_str())
}

/// Applies `rule` to every cell. Cell `j` draws from its own stream
/// `(seed, j)`, so the result does not depend on processing order.
pub fn substitute(
    map: &FeatureMap,
    bank: &ConceptBank,
    rule: &SubstitutionRule,
    seed: u64,
) -> Result<(FeatureMap, Vec<SwapRecord>)> {
    rule.validate(bank)?;
    if map.dim() != bank.dim {
        bail!(Dimension, "feature dimension {} against bank dimension {}", map.dim(), bank.dim);
    }
    let targets: Vec<(String, f64)> = {
        let n = bank.tgt.len() as f64;
        bank.tgt.iter().map(|t| (t.clone(), 1.0 / n)).collect()
    };
    let mut out = map.clone();
    let mut swaps = Vec::new();
    for j in 0..map.cells() {
        let mut m = match_concept(map.cell(j), bank, rule.similarity)?;
        m.cell = j;
        if !(m.score >= rule.threshold) {
            continue;
        }
        let mut r = rng::stream(seed, &[0x5B57, j as u64]);
        let coin: f64 = r.random();
        if !(coin < rule.swap_probability) {
            continue;
        }
        let pick: f64 = r.random();
        let replacement = match &rule.replacement {
            Replacement::IdentityToMatched => m.name.clone(),
            Replacement::UniformTargets => sample_row(&targets, pick).to_string(),
            Replacement::Map(rows) => match rows.get(&m.name) {
                Some(row) if !row.is_empty() => sample_row(row, pick).to_string(),
                _ => bail!(Rule, "no replacement row for matched concept '{}'", m.name),
            },
        };
        let v = bank.get(&replacement).expect("replacement names are validated");
        out.cell_mut(j).copy_from_slice(v);
        swaps.push(SwapRecord { matched: m, replacement });
    }
    Ok((out, swaps))
}

/// Threshold-gated swap of image features for their matched text features.
pub fn cross_modality_swap(
    map: &FeatureMap,
    bank: &ConceptBank,
    similarity: Similarity,
    threshold: f64,
) -> Result<(FeatureMap, Vec<SwapRecord>)> {
    substitute(map, bank, &SubstitutionRule::cross_modality(threshold, similarity), 0)
}

/// One augmented sample and the cells that were swapped in it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub index: usize,
    pub map: FeatureMap,
    pub swaps: Vec<SwapRecord>,
}

/// Applies [`substitute`] to each sample independently (sample `k` uses the
/// stream `(seed, k)`). The input is left untouched.
pub fn augment_dataset(
    dataset: &[FeatureMap],
    bank: &ConceptBank,
    rule: &SubstitutionRule,
    seed: u64,
) -> Result<Vec<AugmentedSample>> {
    dataset
        .iter()
        .enumerate()
        .map(|(k, map)| {
            let (map, swaps) = substitute(map, bank, rule, rng::derive(seed, k as u64))?;
            Ok(AugmentedSample { index: k, map, swaps })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn basis_bank() -> ConceptBank {
        ConceptBank::new(
            vec![("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 1.0])],
            &["a", "b"],
            &["a", "b"],
        )
        .unwrap()
    }

    #[test]
    fn bank_normalizes_and_validates() {
        let b = ConceptBank::new(
            vec![("road".to_string(), vec![3.0, 4.0, 0.0])],
            &["road"],
            &[],
        )
        .unwrap();
        assert_eq!(b.get("road").unwrap(), &[0.6f32, 0.8, 0.0]);
        let dup = ConceptBank::new(
            vec![("x".to_string(), vec![1.0]), ("x".to_string(), vec![2.0])],
            &[] as &[&str],
            &[],
        );
        assert!(matches!(dup, Err(crate::Error::Validation(_))));
        let unknown = ConceptBank::new(vec![("tree".to_string(), vec![1.0, 0.0])], &["tree"], &["house"]);
        assert!(matches!(unknown, Err(crate::Error::Validation(msg)) if msg.contains("house")));
        let mixed = ConceptBank::new(
            vec![("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![1.0])],
            &[] as &[&str],
            &[],
        );
        assert!(matches!(mixed, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn synth_encoding_is_deterministic_unit() {
        let a = synth_text_encode("road", 3, 32);
        assert_eq!(a, synth_text_encode("road", 3, 32));
        assert_ne!(a, synth_text_encode("road", 4, 32));
        let n: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn match_examples() {
        let b = basis_bank();
        let m = match_concept(&[0.9, 0.1], &b, Similarity::Dot).unwrap();
        assert_eq!(m.name, "a");
        assert!((m.score - 0.9).abs() < 1e-7);
        let m = match_concept(b.get("b").unwrap(), &b, Similarity::Cosine).unwrap();
        assert_eq!((m.name.as_str(), m.score), ("b", 1.0));
        let m = match_concept(&[0.5, 0.5], &b, Similarity::Cosine).unwrap();
        assert_eq!(m.name, "a");
        let empty = b.with_roles::<&str>(&[], &["a"]).unwrap();
        assert!(matches!(match_concept(&[1.0, 0.0], &empty, Similarity::Dot), Err(crate::Error::Config(_))));
    }

    fn scene_bank() -> ConceptBank {
        synth_bank(&["house", "road", "sky", "tree"], 11, 32, &["road", "sky", "tree"], &["house"]).unwrap()
    }

    fn map_of(bank: &ConceptBank, names: &[&str]) -> FeatureMap {
        let data: Vec<f32> = names.iter().flat_map(|n| bank.get(n).unwrap().to_vec()).collect();
        FeatureMap::new(2, names.len() / 2, bank.dim(), data).unwrap()
    }

    #[test]
    fn four_cell_tree_to_house() {
        let bank = scene_bank();
        let map = map_of(&bank, &["road", "road", "tree", "sky"]);
        let h = Replacement::from_weights([("tree".to_string(), vec![("house".to_string(), 1.0)])].into()).unwrap();
        let rule = SubstitutionRule { threshold: 0.9, swap_probability: 1.0, replacement: h, ..Default::default() };
        // road and sky cells have no replacement row; restrict sources to tree
        let bank_tree = bank.with_roles(&["tree"], &["house"]).unwrap();
        let (out, swaps) = substitute(&map, &bank_tree, &rule, 1).unwrap();
        // scalar loop oracle
        for j in 0..4 {
            let expected = if j == 2 { bank.get("house").unwrap() } else { map.cell(j) };
            assert_eq!(out.cell(j), expected, "cell {j}");
        }
        assert_eq!(swaps.len(), 1);
        assert_eq!(swaps[0].matched.cell, 2);
        // with all scene concepts as sources the road cell needs a row too
        assert!(matches!(substitute(&map, &bank, &rule, 1), Err(crate::Error::Rule(_))));
    }

    #[test]
    fn infinite_thresholds() {
        let bank = scene_bank();
        let map = map_of(&bank, &["road", "sky", "tree", "tree"]);
        let mut noisy = map.clone();
        noisy.cell_mut(0)[0] += 0.1;
        let (same, swaps) = cross_modality_swap(&noisy, &bank, Similarity::Cosine, f64::INFINITY).unwrap();
        assert_eq!(same, noisy);
        assert!(swaps.is_empty());
        let (text, swaps) = cross_modality_swap(&noisy, &bank, Similarity::Cosine, f64::NEG_INFINITY).unwrap();
        assert_eq!(text, map);
        assert_eq!(swaps.len(), 4);
    }

    #[test]
    fn rule_validation() {
        let bank = scene_bank();
        let mut rule = SubstitutionRule { swap_probability: 1.5, ..Default::default() };
        assert!(rule.validate(&bank).is_err());
        rule.swap_probability = 0.5;
        rule.replacement = Replacement::Map([("tree".to_string(), vec![("sky".to_string(), 1.0)])].into());
        assert!(matches!(rule.validate(&bank), Err(crate::Error::Rule(m)) if m.contains("sky")));
        rule.replacement = Replacement::Map([("tree".to_string(), vec![("house".to_string(), 0.5)])].into());
        assert!(rule.validate(&bank).is_err());
    }

    #[test]
    fn zero_probability_changes_nothing() {
        let bank = scene_bank();
        let data = vec![map_of(&bank, &["road", "tree", "tree", "sky"])];
        let rule = SubstitutionRule { threshold: f64::NEG_INFINITY, swap_probability: 0.0, ..Default::default() };
        let out = augment_dataset(&data, &bank.with_roles(&["tree"], &["house"]).unwrap(), &rule, 5).unwrap();
        assert_eq!(out[0].map, data[0]);
        assert!(out[0].swaps.is_empty());
    }
}
