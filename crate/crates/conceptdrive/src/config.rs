// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one TOML file with a section per module.
//! Values resolve as command-line flags > file > built-in defaults, and the
//! master `seed` has no default.

use std::path::{Path, PathBuf};

use conceptdrive_core::analysis::SvcConfig;
use conceptdrive_core::concept::{synth_bank, ConceptBank, Replacement, Similarity, SubstitutionRule};
use conceptdrive_core::experiment::{ClassifyConfig, CollectConfig, Harness};
use conceptdrive_core::masked::{ExtractConfig, MaskBuilderConfig, MaskKind, MaskScope};
use conceptdrive_core::policy::{AdamConfig, PolicyParams, TrainConfig};
use conceptdrive_core::sim::{Palette, ScenarioFamily, SimConfig};
use conceptdrive_core::vit::{EncoderConfig, EncoderWeights, Pooling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::formats::{encoder_from_archive, policy_from_archive, read_bank, read_replacement_map};

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Encoder weights archive; seeded weights from `[encoder]` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Concept bank (JSON lines); synthesized from `[concepts]` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    /// Policy checkpoint used by evaluation commands and the service.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    /// Scenario file for `rollout`; a generated family member when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<PathBuf>,
    /// Replacement map for `rule.replacement = "map"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replacement_map: Option<PathBuf>,
    /// Where results go. Left out of the serialized (hashed) config: it does
    /// not change any result.
    #[serde(skip_serializing)]
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { weights: None, bank: None, policy: None, scenarios: None, replacement_map: None, output: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsConfig {
    pub names: Vec<String>,
    pub dim: usize,
    /// Seed of the deterministic name → vector text encoder.
    pub text_seed: u64,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        Self {
            names: strings(&[
                "road", "lane marking", "sky", "tree", "car", "truck", "house", "shop", "building", "fence",
            ]),
            dim: 32,
            text_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub key_dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub base_grid: [usize; 2],
    pub pooling: String,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        Self {
            dim: c.dim,
            key_dim: c.key_dim,
            layers: c.layers,
            mlp_hidden: c.mlp_hidden,
            patch_size: c.patch_size,
            base_grid: [c.base_grid.0, c.base_grid.1],
            pooling: c.pooling.name().into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// 1-based layer at which the distance mask is applied.
    pub layer: usize,
    pub mask_kind: String,
    pub alpha: f64,
    pub z: f64,
    pub r: f64,
    /// "layer" (mask layer only) or "from_layer" (mask layer and later).
    pub scope: String,
    /// Dense extraction grid `[rows, cols]`; non-overlapping patches when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    /// Per-component noise of the simulator's image features.
    pub feature_sigma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            layer: 2,
            mask_kind: "box".into(),
            alpha: 2.0,
            z: 2.0,
            r: -1e4,
            scope: "layer".into(),
            grid: None,
            feature_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub road: String,
    pub lane_edge: String,
    pub obstacle: String,
    pub offroad: String,
    pub sky: String,
    pub obstacle_concepts: Vec<String>,
    pub offroad_concepts: Vec<String>,
    /// Palette of the held-out family used by `augment-train`.
    pub ood_obstacle_concepts: Vec<String>,
    pub ood_offroad_concepts: Vec<String>,
    pub lane_length: f64,
    pub max_curvature: f64,
    pub half_width: f64,
    pub obstacle_count: [usize; 2],
    pub obstacle_offset: f64,
    pub obstacle_radius: [f64; 2],
    pub max_start_offset: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let f = ScenarioFamily::default();
        Self {
            road: f.palette.road.clone(),
            lane_edge: f.palette.lane_edge.clone(),
            obstacle: f.palette.obstacle.clone(),
            offroad: f.palette.offroad.clone(),
            sky: f.palette.sky.clone(),
            obstacle_concepts: f.obstacle_concepts.clone(),
            offroad_concepts: f.offroad_concepts.clone(),
            ood_obstacle_concepts: f.obstacle_concepts.clone(),
            ood_offroad_concepts: strings(&["house", "shop"]),
            lane_length: f.lane_length,
            max_curvature: f.max_curvature,
            half_width: f.half_width,
            obstacle_count: [f.obstacle_count.0, f.obstacle_count.1],
            obstacle_offset: f.obstacle_offset,
            obstacle_radius: [f.obstacle_radius.0, f.obstacle_radius.1],
            max_start_offset: f.max_start_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: usize,
    pub speed: f64,
    /// Heading-error failure bound (radians).
    pub max_heading: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self { dt: s.dt, horizon: s.horizon, speed: s.speed, max_heading: s.max_heading }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub similarity: String,
    pub threshold: f64,
    pub swap_probability: f64,
    /// "uniform", "identity" or "map" (reads `paths.replacement_map`).
    pub replacement: String,
    /// Source (matchable) and target (replacement) concepts for augmentation.
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// Thresholds for `sweep-threshold`; `inf` and `-inf` are allowed.
    pub thresholds: Vec<f64>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            similarity: "cosine".into(),
            threshold: 0.5,
            swap_probability: 0.5,
            replacement: "uniform".into(),
            src: strings(&["tree"]),
            tgt: strings(&["house", "shop", "building", "fence"]),
            thresholds: vec![f64::INFINITY, 0.99, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.3, f64::NEG_INFINITY],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub scenarios: usize,
    pub steering_noise: f64,
    pub dagger_rounds: usize,
    pub dagger_scenarios: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            scenarios: 60,
            steering_noise: 0.05,
            dagger_rounds: 2,
            dagger_scenarios: 30,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            hidden: 32,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trials: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub k: usize,
    pub train_rollouts: usize,
    pub test_rollouts: usize,
    pub kmeans_cells: usize,
    pub kmeans_iter: usize,
    pub lambda: f64,
    pub epochs: usize,
    /// "policy" (needs `paths.policy`) or "teacher".
    pub driver: String,
}

impl Default for ClassifySection {
    fn default() -> Self {
        let c = ClassifyConfig::default();
        Self {
            k: c.k,
            train_rollouts: c.train_rollouts,
            test_rollouts: c.test_rollouts,
            kmeans_cells: c.kmeans_cells,
            kmeans_iter: c.kmeans_iter,
            lambda: c.svc.lambda,
            epochs: c.svc.epochs,
            driver: "policy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub workers: usize,
    /// Allowed CORS origin; "*" allows any.
    pub cors_origin: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8080, workers: 2, cors_origin: "*".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub concepts: ConceptsConfig,
    pub encoder: EncoderSection,
    pub pipeline: PipelineConfig,
    pub scenario: ScenarioSection,
    pub sim: SimSection,
    pub rule: RuleConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub classify: ClassifySection,
    pub service: ServiceConfig,
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn toml_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key '{key}'")))?;
    let mut cur = table;
    for p in parts {
        let slot = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Resolves defaults, then `file`, then `overrides` (`section.key`, raw
    /// TOML value) in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            set_dotted(&mut table, key, toml_value(raw))?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.rule.threshold.is_nan() || self.rule.thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::Config("rule thresholds must not be NaN".into()));
        }
        if self.service.workers == 0 {
            return Err(Error::Config("service.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a master seed is required (config 'seed' or --seed)".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn existing(path: &Path, what: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} '{}' does not exist", path.display())))
        }
    }

    pub fn similarity(&self) -> Result<Similarity> {
        Ok(Similarity::parse(&self.rule.similarity)?)
    }

    /// The harness bank. Every concept is matchable unless the bank file
    /// assigns source roles itself.
    pub fn bank(&self) -> Result<ConceptBank> {
        match &self.paths.bank {
            Some(p) => {
                Self::existing(p, "concept bank")?;
                let bank = read_bank(p)?;
                if bank.sources().is_empty() {
                    let names: Vec<String> = bank.names().map(String::from).collect();
                    let tgt: Vec<String> = bank.targets().iter().cloned().collect();
                    Ok(bank.with_roles(&names, &tgt)?)
                } else {
                    Ok(bank)
                }
            }
            None => {
                let c = &self.concepts;
                Ok(synth_bank(&c.names, c.text_seed, c.dim, &c.names, &[])?)
            }
        }
    }

    fn family_with(&self, obstacles: &[String], offroad: &[String]) -> ScenarioFamily {
        let s = &self.scenario;
        ScenarioFamily {
            lane_length: s.lane_length,
            max_curvature: s.max_curvature,
            half_width: s.half_width,
            obstacle_count: (s.obstacle_count[0], s.obstacle_count[1]),
            obstacle_offset: s.obstacle_offset,
            obstacle_radius: (s.obstacle_radius[0], s.obstacle_radius[1]),
            max_start_offset: s.max_start_offset,
            palette: Palette {
                road: s.road.clone(),
                lane_edge: s.lane_edge.clone(),
                obstacle: s.obstacle.clone(),
                offroad: s.offroad.clone(),
                sky: s.sky.clone(),
            },
            obstacle_concepts: obstacles.to_vec(),
            offroad_concepts: offroad.to_vec(),
            ..ScenarioFamily::default()
        }
    }

    pub fn family(&self) -> ScenarioFamily {
        self.family_with(&self.scenario.obstacle_concepts, &self.scenario.offroad_concepts)
    }

    /// The held-out family of `augment-train`.
    pub fn ood_family(&self) -> ScenarioFamily {
        self.family_with(&self.scenario.ood_obstacle_concepts, &self.scenario.ood_offroad_concepts)
    }

    pub fn sim(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig { dt: s.dt, horizon: s.horizon, speed: s.speed, max_heading: s.max_heading, ..SimConfig::default() }
    }

    pub fn harness(&self) -> Result<Harness> {
        let bank = self.bank()?;
        let family = self.family();
        check_concepts(&bank, &family, "scenario")?;
        check_concepts(&bank, &self.ood_family(), "held-out scenario")?;
        Ok(Harness { family, sim: self.sim(), bank, feature_sigma: self.pipeline.feature_sigma })
    }

    pub fn collect(&self) -> Result<CollectConfig> {
        let t = &self.training;
        Ok(CollectConfig {
            scenarios: t.scenarios,
            steering_noise: t.steering_noise,
            dagger_rounds: t.dagger_rounds,
            dagger_scenarios: t.dagger_scenarios,
            seed: self.seed()?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = &self.training;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed()?,
            adam: AdamConfig { lr: t.lr, ..AdamConfig::default() },
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
        })
    }

    pub fn classify_config(&self) -> Result<ClassifyConfig> {
        let c = &self.classify;
        let seed = self.seed()?;
        Ok(ClassifyConfig {
            k: c.k,
            train_rollouts: c.train_rollouts,
            test_rollouts: c.test_rollouts,
            kmeans_cells: c.kmeans_cells,
            kmeans_iter: c.kmeans_iter,
            svc: SvcConfig { lambda: c.lambda, epochs: c.epochs, seed, ..SvcConfig::default() },
            seed,
        })
    }

    /// Loads `paths.policy` and checks it fits the harness observations.
    pub fn policy(&self, h: &Harness) -> Result<PolicyParams> {
        let path = self.paths.policy.as_ref().ok_or_else(|| {
            Error::Config("this command needs a policy checkpoint (paths.policy or --policy)".into())
        })?;
        Self::existing(path, "policy checkpoint")?;
        let p = policy_from_archive(&Archive::read(path)?)?;
        let want = h.policy_config(p.config.hidden);
        if (p.config.grid, p.config.feature_dim) != (want.grid, want.feature_dim) {
            return Err(Error::Config(format!(
                "policy '{}' expects a {:?} grid of {}-dim features; the configuration produces {:?} x {}",
                path.display(),
                p.config.grid,
                p.config.feature_dim,
                want.grid,
                want.feature_dim
            )));
        }
        Ok(p)
    }

    pub fn encoder(&self) -> Result<EncoderWeights> {
        match &self.paths.weights {
            Some(p) => {
                Self::existing(p, "encoder weights")?;
                encoder_from_archive(&Archive::read(p)?)
            }
            None => {
                let e = &self.encoder;
                let config = EncoderConfig {
                    dim: e.dim,
                    key_dim: e.key_dim,
                    layers: e.layers,
                    mlp_hidden: e.mlp_hidden,
                    patch_size: e.patch_size,
                    base_grid: (e.base_grid[0], e.base_grid[1]),
                    pooling: Pooling::parse(&e.pooling)?,
                    ..EncoderConfig::default()
                };
                Ok(EncoderWeights::seeded(config, e.seed)?)
            }
        }
    }

    pub fn extract(&self) -> Result<ExtractConfig> {
        let p = &self.pipeline;
        let scope = match p.scope.as_str() {
            "layer" => MaskScope::LayerOnly,
            "from_layer" => MaskScope::FromLayer,
            other => return Err(Error::Config(format!("unknown mask scope '{other}' (expected layer or from_layer)"))),
        };
        let cfg = ExtractConfig {
            layer: p.layer,
            mask: MaskBuilderConfig { kind: MaskKind::parse(&p.mask_kind, p.alpha)?, z: p.z, r: p.r },
            scope,
        };
        cfg.mask.validate()?;
        Ok(cfg)
    }

    /// The augmentation rule and the bank carrying its roles.
    pub fn rule(&self, bank: &ConceptBank) -> Result<(ConceptBank, SubstitutionRule)> {
        let r = &self.rule;
        let replacement = match r.replacement.as_str() {
            "uniform" => Replacement::UniformTargets,
            "identity" => Replacement::IdentityToMatched,
            "map" => {
                let path = self.paths.replacement_map.as_ref().ok_or_else(|| {
                    Error::Config("rule.replacement = \"map\" needs paths.replacement_map".into())
                })?;
                Self::existing(path, "replacement map")?;
                read_replacement_map(path)?
            }
            other => return Err(Error::Config(format!("unknown replacement '{other}' (expected uniform, identity or map)"))),
        };
        let rule = SubstitutionRule {
            similarity: self.similarity()?,
            threshold: r.threshold,
            swap_probability: r.swap_probability,
            replacement,
        };
        let roles = bank.with_roles(&r.src, &r.tgt)?;
        rule.validate(&roles)?;
        Ok((roles, rule))
    }
}

fn check_concepts(bank: &ConceptBank, family: &ScenarioFamily, what: &str) -> Result<()> {
    let missing: Vec<String> = family.concepts().into_iter().filter(|c| bank.get(c).is_none()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} concepts missing from the bank: {}", missing.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 3\n[eval]\ntrials = 7\n[training]\nepochs = 4\n").unwrap();
        let over = vec![("eval.trials".to_string(), "9".to_string())];
        let cfg = ExperimentConfig::load(Some(&file), &over).unwrap();
        assert_eq!(cfg.eval.trials, 9);
        assert_eq!(cfg.training.epochs, 4);
        assert_eq!(cfg.training.hidden, TrainingConfig::default().hidden);
        assert_eq!(cfg.seed().unwrap(), 3);
    }

    #[test]
    fn seed_is_required_and_unknown_keys_rejected() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        assert!(matches!(cfg.seed(), Err(Error::Config(_))));
        let err = ExperimentConfig::load(None, &[("eval.trails".into(), "3".into())]).unwrap_err();
        assert!(err.to_string().contains("trails"), "{err}");
    }

    #[test]
    fn infinite_thresholds_and_hash_stability() {
        let over = vec![("rule.thresholds".to_string(), "[inf, 0.5, -inf]".to_string()), ("seed".into(), "1".into())];
        let a = ExperimentConfig::load(None, &over).unwrap();
        assert_eq!(a.rule.thresholds, vec![f64::INFINITY, 0.5, f64::NEG_INFINITY]);
        let b = ExperimentConfig::load(None, &over).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::load(None, &[("seed".into(), "2".into())]).unwrap();
        assert_ne!(a.hash(), c.hash());
        let round: ExperimentConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(round, a);
    }

    #[test]
    fn missing_weights_is_a_config_error() {
        let cfg = ExperimentConfig::load(None, &[("paths.weights".into(), "\"/nonexistent/w.cdt\"".into())]).unwrap();
        let err = cfg.encoder().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/w.cdt"));
    }

    #[test]
    fn default_harness_covers_both_families() {
        let cfg = ExperimentConfig::load(None, &[("seed".into(), "0".into())]).unwrap();
        cfg.harness().unwrap();
        let (bank, _) = cfg.rule(&cfg.bank().unwrap()).unwrap();
        assert!(bank.sources().contains("tree"));
    }
}
