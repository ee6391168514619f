// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `conceptdrive` subcommands. Each one resolves an
//! [`ExperimentConfig`], writes its results into the output directory and
//! finishes with `manifest.json` (config hash, versions, seed, and a digest
//! of every output file).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use conceptdrive_core::analysis::coefficient_map;
use conceptdrive_core::experiment::{
    augment_train, check_subsets, classify, evaluate_policy, evaluate_subset, fit_policy, mean_std, sweep_threshold,
    ClassifyReport,
};
use conceptdrive_core::masked::{extract_dense, stride_for_grid};
use conceptdrive_core::policy::{dataset_loss, Maneuver};
use conceptdrive_core::rng;
use conceptdrive_core::sim::{rollout, Driver, Evaluation};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::archive::{Archive, Tensor};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::{
    coefficient_archive, feature_map_archive, policy_archive, policy_from_archive, read_scenario, read_subsets,
    rollout_jsonl, rollout_summary, write_json, ScenarioFile, Threshold,
};
use crate::scene::{load_image, render_image, scene_state, SceneId};

#[derive(Debug, Parser)]
#[command(name = "conceptdrive", version, about = "Concept-space experiments on a toy driving harness")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (required here or in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Override any config value, e.g. `--set training.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriverKind {
    Teacher,
    Policy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dense masked feature extraction from an image file or a synthetic scene.
    Extract {
        /// PNG image.
        #[arg(long, conflicts_with = "scene")]
        image: Option<PathBuf>,
        /// Synthetic scene id, `scene:<index>[:<step>]`.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// One closed-loop rollout, logged step by step.
    Rollout {
        /// Scenario JSON; otherwise scenario `--index` of the configured family.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, value_enum, default_value_t = DriverKind::Teacher)]
        driver: DriverKind,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Behavior cloning with DAgger; writes a policy checkpoint.
    Train {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Closed-loop performance across cross-modality thresholds.
    SweepThreshold {
        /// Comma-separated thresholds; `inf` and `-inf` are allowed.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        thresholds: Option<Vec<String>>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Closed-loop performance with cells replaced by concepts from subsets.
    DebugConcepts {
        /// JSON list of `{name, concepts, threshold, trials, seed}` rows, or
        /// an exported console history.
        #[arg(long)]
        subsets: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Baseline vs concept-augmented training, evaluated on held-out scenes.
    AugmentTrain {
        #[arg(long)]
        replacement_map: Option<PathBuf>,
        #[arg(long)]
        swap_probability: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Cluster features, fit a maneuver classifier, export coefficient maps.
    Classify {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum)]
        driver: Option<DriverKind>,
    },
    /// HTTP debugging service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_value(p: &Path) -> String {
    quoted(&p.to_string_lossy())
}

impl Cli {
    /// Config overrides in increasing precedence: `--set`, then named flags.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.common.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(seed) = self.common.seed {
            put("seed", seed.to_string());
        }
        if let Some(o) = &self.common.output {
            put("paths.output", path_value(o));
        }
        let trials = |put: &mut dyn FnMut(&str, String), t: &Option<usize>| {
            if let Some(t) = t {
                put("eval.trials", t.to_string());
            }
        };
        match &self.command {
            Command::Extract { weights, .. } => {
                if let Some(w) = weights {
                    put("paths.weights", path_value(w));
                }
            }
            Command::Rollout { policy, .. } | Command::Classify { policy, .. } => {
                if let Some(p) = policy {
                    put("paths.policy", path_value(p));
                }
                if let Command::Classify { driver: Some(d), .. } = &self.command {
                    put("classify.driver", quoted(if *d == DriverKind::Teacher { "teacher" } else { "policy" }));
                }
            }
            Command::Train { trials: t } => trials(&mut put, t),
            Command::SweepThreshold { thresholds, policy, trials: t } => {
                if let Some(list) = thresholds {
                    let parsed: Vec<String> = list
                        .iter()
                        .map(|s| {
                            Threshold::parse(s)
                                .map(toml_float)
                                .ok_or_else(|| Error::Config(format!("invalid threshold '{s}'")))
                        })
                        .collect::<Result<_>>()?;
                    put("rule.thresholds", format!("[{}]", parsed.join(", ")));
                }
                if let Some(p) = policy {
                    put("paths.policy", path_value(p));
                }
                trials(&mut put, t);
            }
            Command::DebugConcepts { policy, trials: t, .. } => {
                if let Some(p) = policy {
                    put("paths.policy", path_value(p));
                }
                trials(&mut put, t);
            }
            Command::AugmentTrain { replacement_map, swap_probability, threshold, trials: t } => {
                if let Some(m) = replacement_map {
                    put("paths.replacement_map", path_value(m));
                    put("rule.replacement", quoted("map"));
                }
                if let Some(p) = swap_probability {
                    put("rule.swap_probability", toml_float(*p));
                }
                if let Some(s) = threshold {
                    let v = Threshold::parse(s).ok_or_else(|| Error::Config(format!("invalid threshold '{s}'")))?;
                    put("rule.threshold", toml_float(v));
                }
                trials(&mut put, t);
            }
            Command::Serve { bind, port, workers, policy } => {
                if let Some(b) = bind {
                    put("service.bind", quoted(b));
                }
                if let Some(p) = port {
                    put("service.port", p.to_string());
                }
                if let Some(w) = workers {
                    put("service.workers", w.to_string());
                }
                if let Some(p) = policy {
                    put("paths.policy", path_value(p));
                }
            }
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.common.config.as_deref(), &self.overrides()?)
    }
}

fn toml_float(v: f64) -> String {
    toml::Value::Float(v).to_string()
}

/// Output files of one command plus its manifest.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn archive(&mut self, name: &str, a: &Archive) -> Result<()> {
        self.write(name, &a.to_bytes())
    }

    /// Writes the resolved config and `manifest.json`.
    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        self.write("config.toml", cfg.to_toml().as_bytes())?;
        let outputs: Vec<Value> = self.files.iter().map(|(n, d)| json!({ "file": n, "sha256": d })).collect();
        let manifest = json!({
            "command": command,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "versions": {
                "conceptdrive": env!("CARGO_PKG_VERSION"),
                "conceptdrive-core": conceptdrive_core::VERSION,
            },
            "outputs": outputs,
        });
        write_json(&self.path("manifest.json"), &manifest)
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn breakdown_json(e: &Evaluation) -> Value {
    let mut m = serde_json::Map::new();
    for label in Maneuver::ALL {
        m.insert(label.name().into(), e.breakdown[label.index()].into());
    }
    Value::Object(m)
}

pub fn evaluation_json(e: &Evaluation) -> Value {
    let (mean, std) = mean_std(&e.per_trial);
    json!({
        "soft_success": e.mean_soft_success,
        "mean": mean,
        "std": std,
        "trials": e.per_trial.len(),
        "breakdown": breakdown_json(e),
        "per_trial": e.per_trial,
        "failures": e.failures.iter().enumerate().filter_map(|(i, f)| f.map(|(kind, label)| json!({
            "trial": i, "kind": kind.name(), "maneuver": label.name(),
        }))).collect::<Vec<_>>(),
    })
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::Extract { image, scene, .. } => extract(&cfg, image.as_deref(), scene.as_deref()),
        Command::Rollout { scenario, index, driver, .. } => run_rollout(&cfg, scenario.as_deref(), *index, *driver),
        Command::Train { .. } => train(&cfg),
        Command::SweepThreshold { .. } => sweep(&cfg),
        Command::DebugConcepts { subsets, .. } => debug(&cfg, subsets),
        Command::AugmentTrain { .. } => augment(&cfg),
        Command::Classify { .. } => run_classify(&cfg),
        Command::Serve { .. } => crate::service::serve_blocking(&cfg),
    }
}

pub fn extract(cfg: &ExperimentConfig, image: Option<&Path>, scene: Option<&str>) -> Result<()> {
    let seed = cfg.seed()?;
    let weights = cfg.encoder()?;
    let extract_cfg = cfg.extract()?;
    let (img, source) = match (image, scene) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(Error::Config(format!("image '{}' does not exist", p.display())));
            }
            (load_image(p)?, json!({ "image": p.to_string_lossy() }))
        }
        (None, Some(id)) => {
            let id = SceneId::parse(id)?;
            let h = cfg.harness()?;
            let (scenario, state) = scene_state(&h, seed, id)?;
            let img = render_image(&scenario, &state, &h.sim, weights.config.patch_size)?;
            (img, json!({ "scene": { "index": id.index, "step": id.step } }))
        }
        (None, None) => return Err(Error::Config("extract needs --image or --scene".into())),
    };
    let p = weights.config.patch_size;
    let (rows, cols) = match cfg.pipeline.grid {
        Some([r, c]) => (r, c),
        None => {
            if img.height() < p || img.width() < p {
                return Err(Error::Config(format!("image {}x{} is smaller than one {p}x{p} patch", img.height(), img.width())));
            }
            ((img.height() - p) / p + 1, (img.width() - p) / p + 1)
        }
    };
    let stride = stride_for_grid(img.height(), img.width(), p, rows, cols)?;
    let map = extract_dense(&weights, &img, &extract_cfg, rows, cols)?;
    let mut out = Outputs::new(&cfg.paths.output)?;
    out.archive("features.cdt", &feature_map_archive(&map))?;
    out.json(
        "extract.json",
        &json!({
            "source": source,
            "image": [img.height(), img.width()],
            "grid": [rows, cols],
            "stride": stride,
            "dim": map.dim(),
            "layer": extract_cfg.layer,
            "mask_kind": extract_cfg.mask.kind.name(),
            "r": extract_cfg.mask.r,
        }),
    )?;
    println!("features {rows}x{cols}x{} (stride {stride}) -> {}", map.dim(), out.path("features.cdt").display());
    out.finish("extract", cfg)
}

pub fn run_rollout(cfg: &ExperimentConfig, scenario: Option<&Path>, index: u64, driver: DriverKind) -> Result<()> {
    let seed = cfg.seed()?;
    let h = cfg.harness()?;
    let scenario = match scenario.or(cfg.paths.scenarios.as_deref()) {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("scenario '{}' does not exist", p.display())));
            }
            read_scenario(p)?
        }
        None => h.family.generate(seed, index),
    };
    let missing: Vec<&str> = scenario_concepts(&scenario).into_iter().filter(|c| h.bank.get(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("scenario concepts missing from the bank: {}", missing.join(", "))));
    }
    let policy = match driver {
        DriverKind::Policy => Some(cfg.policy(&h)?),
        DriverKind::Teacher => None,
    };
    let d = policy.as_ref().map_or(Driver::Teacher, Driver::Policy);
    let rec = rollout(d, &scenario, &h.sim, &h.pipeline(rng::derive(seed, 0x0B5)), false)?;
    let mut out = Outputs::new(&cfg.paths.output)?;
    out.json("scenario.json", &serde_json::to_value(ScenarioFile::from(&scenario)).expect("scenario serializes"))?;
    out.write("rollout.jsonl", rollout_jsonl(&rec).as_bytes())?;
    out.json("summary.json", &rollout_summary(&rec))?;
    println!("soft success {:.4} over {} steps", rec.soft_success, rec.steps.len());
    out.finish("rollout", cfg)
}

fn scenario_concepts(s: &conceptdrive_core::sim::Scenario) -> Vec<&str> {
    let p = &s.palette;
    let mut v = vec![p.road.as_str(), p.lane_edge.as_str(), p.obstacle.as_str(), p.offroad.as_str(), p.sky.as_str()];
    v.extend(s.obstacles.iter().map(|o| o.concept.as_str()));
    v.sort_unstable();
    v.dedup();
    v
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let h = cfg.harness()?;
    let (params, data) = fit_policy(&h, &cfg.collect()?, &cfg.train()?, cfg.training.hidden, None)?;
    let archive = policy_archive(&params);
    // evaluate what was saved, so later commands reproduce these numbers
    let saved = policy_from_archive(&archive)?;
    let eval = evaluate_policy(&h, &saved, None, cfg.eval.trials, seed)?;
    let mut out = Outputs::new(&cfg.paths.output)?;
    out.archive("policy.cdt", &archive)?;
    out.json(
        "train.json",
        &json!({
            "samples": data.len(),
            "parameters": params.theta.len(),
            "dataset_loss": dataset_loss(&saved, &data)?,
            "evaluation": evaluation_json(&eval),
        }),
    )?;
    println!("trained on {} samples; soft success {:.4} over {} trials", data.len(), eval.mean_soft_success, cfg.eval.trials);
    out.finish("train", cfg)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let h = cfg.harness()?;
    let params = cfg.policy(&h)?;
    let thresholds = &cfg.rule.thresholds;
    if thresholds.is_empty() {
        return Err(Error::Config("no thresholds to sweep".into()));
    }
    let rows = sweep_threshold(&h, &params, thresholds, cfg.similarity()?, cfg.eval.trials, seed)?;
    let mut out = Outputs::new(&cfg.paths.output)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.threshold.to_string(), r.mean.to_string(), r.std.to_string(), r.trials.to_string()])
        .collect();
    out.write("sweep.csv", &csv_bytes(&["threshold", "mean", "std", "trials"], &table))?;
    let json_rows: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "threshold": Threshold(r.threshold), "mean": r.mean, "std": r.std,
                "trials": r.trials, "replaced_cells": r.replaced_cells,
            })
        })
        .collect();
    out.json("sweep.json", &json!({ "similarity": cfg.rule.similarity, "rows": json_rows }))?;
    for r in &rows {
        println!("{:>8} {:.4} ± {:.4} ({} cells replaced)", r.threshold, r.mean, r.std, r.replaced_cells);
    }
    out.finish("sweep-threshold", cfg)?;
    for a in &rows {
        for b in &rows {
            if a.threshold > b.threshold && a.replaced_cells > b.replaced_cells {
                return Err(Error::Assertion(format!(
                    "threshold {} replaced {} cells but the lower threshold {} only {}",
                    a.threshold, a.replaced_cells, b.threshold, b.replaced_cells
                )));
            }
        }
    }
    Ok(())
}

pub fn debug(cfg: &ExperimentConfig, subsets: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let h = cfg.harness()?;
    if !subsets.exists() {
        return Err(Error::Config(format!("subset list '{}' does not exist", subsets.display())));
    }
    let entries = read_subsets(subsets)?;
    let params = cfg.policy(&h)?;
    let similarity = cfg.similarity()?;
    let plan: Vec<_> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.to_subset(i), e.trials.unwrap_or(cfg.eval.trials), e.seed.unwrap_or(seed)))
        .collect();
    let subsets: Vec<_> = plan.iter().map(|p| p.0.clone()).collect();
    check_subsets(&h.bank, &subsets, similarity)?;
    let mut table = Vec::new();
    let mut json_rows = Vec::new();
    for (subset, trials, s) in &plan {
        let eval = evaluate_subset(&h, &params, subset, similarity, *trials, *s)?;
        let b = eval.breakdown;
        table.push(vec![
            subset.name.clone(),
            subset.concepts.join(";"),
            subset.threshold.to_string(),
            trials.to_string(),
            s.to_string(),
            eval.mean_soft_success.to_string(),
            b[0].to_string(),
            b[1].to_string(),
            b[2].to_string(),
        ]);
        json_rows.push(json!({
            "name": subset.name, "concepts": subset.concepts, "threshold": Threshold(subset.threshold),
            "seed": s, "evaluation": evaluation_json(&eval),
        }));
        println!("{:<20} {:.4}  [{:.4} {:.4} {:.4}]", subset.name, eval.mean_soft_success, b[0], b[1], b[2]);
    }
    let mut out = Outputs::new(&cfg.paths.output)?;
    let header = [
        "subset", "concepts", "threshold", "trials", "seed", "soft_success", "lane_stable", "avoidance", "recovery",
    ];
    out.write("debug.csv", &csv_bytes(&header, &table))?;
    out.json("debug.json", &json!({ "rows": json_rows }))?;
    out.finish("debug-concepts", cfg)
}

pub fn augment(cfg: &ExperimentConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let h = cfg.harness()?;
    let (bank, rule) = cfg.rule(&h.bank)?;
    let ood = cfg.ood_family();
    let report = augment_train(
        &h,
        &ood,
        &bank,
        &rule,
        &cfg.collect()?,
        &cfg.train()?,
        cfg.training.hidden,
        cfg.eval.trials,
        seed,
    )?;
    let grid_cols = h.sim.view.cols;
    let mut out = Outputs::new(&cfg.paths.output)?;
    out.archive("baseline.cdt", &policy_archive(&report.baseline))?;
    out.archive("augmented.cdt", &policy_archive(&report.augmented))?;
    let mut table = Vec::new();
    for (name, e) in [("baseline", &report.baseline_eval), ("augmented", &report.augmented_eval)] {
        let (mean, std) = mean_std(&e.per_trial);
        let b = e.breakdown;
        table.push(vec![
            name.to_string(),
            mean.to_string(),
            std.to_string(),
            e.per_trial.len().to_string(),
            b[0].to_string(),
            b[1].to_string(),
            b[2].to_string(),
        ]);
    }
    let header = ["policy", "mean", "std", "trials", "lane_stable", "avoidance", "recovery"];
    out.write("ood_eval.csv", &csv_bytes(&header, &table))?;
    let mut cells = String::new();
    for c in &report.cells {
        let j = c.swap.matched.cell;
        let line = json!({
            "sample": c.sample, "cell": j, "row": j / grid_cols, "col": j % grid_cols,
            "matched": c.swap.matched.name, "score": c.swap.matched.score, "replacement": c.swap.replacement,
        });
        cells.push_str(&line.to_string());
        cells.push('\n');
    }
    out.write("augmented_cells.jsonl", cells.as_bytes())?;
    out.json(
        "augment.json",
        &json!({
            "augmented_cells": report.cells.len(),
            "baseline": evaluation_json(&report.baseline_eval),
            "augmented": evaluation_json(&report.augmented_eval),
            "gain": report.augmented_eval.mean_soft_success - report.baseline_eval.mean_soft_success,
        }),
    )?;
    println!(
        "held-out soft success: baseline {:.4}, augmented {:.4} ({} cells augmented)",
        report.baseline_eval.mean_soft_success,
        report.augmented_eval.mean_soft_success,
        report.cells.len()
    );
    out.finish("augment-train", cfg)?;
    if rule.swap_probability == 0.0 && (report.baseline != report.augmented || !report.cells.is_empty()) {
        return Err(Error::Assertion("swap probability 0 still changed the training data".into()));
    }
    Ok(())
}

/// Coefficient maps of every (class, cluster) pair, `[classes, k, rows, cols]`.
pub fn all_coefficient_maps(report: &ClassifyReport, grid: (usize, usize)) -> Result<Vec<f64>> {
    let k = report.model.k();
    let mut out = Vec::with_capacity(Maneuver::ALL.len() * k * grid.0 * grid.1);
    for class in 0..report.classifier.classes {
        for cluster in 0..k {
            out.extend(coefficient_map(&report.classifier, grid, k, class, cluster)?);
        }
    }
    Ok(out)
}

pub fn classify_json(report: &ClassifyReport) -> Value {
    let per_class: serde_json::Map<String, Value> = Maneuver::ALL
        .iter()
        .map(|m| (m.name().to_string(), report.class_accuracy[m.index()].map_or(Value::Null, Value::from)))
        .collect();
    json!({
        "train_accuracy": report.train_accuracy,
        "test_accuracy": report.test_accuracy,
        "class_accuracy": per_class,
        "train_samples": report.train_samples,
        "test_samples": report.test_samples,
        "anchors": report.anchors,
        "k": report.model.k(),
        "kmeans_iterations": report.model.iterations,
        "inertia": report.model.inertia,
    })
}

pub fn run_classify(cfg: &ExperimentConfig) -> Result<()> {
    let h = cfg.harness()?;
    let ccfg = cfg.classify_config()?;
    let policy = match cfg.classify.driver.as_str() {
        "policy" => Some(cfg.policy(&h)?),
        "teacher" => None,
        other => return Err(Error::Config(format!("unknown classify driver '{other}' (expected policy or teacher)"))),
    };
    let driver = policy.as_ref().map_or(Driver::Teacher, Driver::Policy);
    let report = classify(&h, driver, &ccfg)?;
    let grid = (h.sim.view.rows, h.sim.view.cols);
    let k = report.model.k();
    let classes: Vec<&str> = Maneuver::ALL.iter().map(|m| m.name()).collect();
    let mut out = Outputs::new(&cfg.paths.output)?;
    let mut clusters = Archive::new().with_meta("inertia", report.model.inertia).with_meta("iterations", report.model.iterations);
    clusters.push(Tensor::new("centers", vec![k, report.model.dim], report.model.centers.iter().map(|&x| x as f32).collect())?)?;
    out.archive("clusters.cdt", &clusters)?;
    let clf = &report.classifier;
    let mut classifier = Archive::new().with_meta("classes", classes.clone());
    classifier.push(Tensor::new("weights", vec![clf.classes, clf.dim], clf.weights.iter().map(|&x| x as f32).collect())?)?;
    classifier.push(Tensor::new("bias", vec![clf.classes], clf.bias.iter().map(|&x| x as f32).collect())?)?;
    out.archive("classifier.cdt", &classifier)?;
    let maps = all_coefficient_maps(&report, grid)?;
    out.archive("coefficients.cdt", &coefficient_archive(&maps, clf.classes, k, grid)?)?;
    out.json(
        "coefficients.json",
        &json!({
            "tensor": "coefficients",
            "layout": ["class", "cluster", "row", "col"],
            "classes": classes,
            "anchors": report.anchors,
            "k": k,
            "grid": [grid.0, grid.1],
        }),
    )?;
    out.json("report.json", &classify_json(&report))?;
    println!("test accuracy {:.4} (train {:.4})", report.test_accuracy, report.train_accuracy);
    for m in Maneuver::ALL {
        match report.class_accuracy[m.index()] {
            Some(a) => println!("  {:<12} {:.4}", m.name(), a),
            None => println!("  {:<12} (no test samples)", m.name()),
        }
    }
    println!("cluster anchors: {}", report.anchors.join(", "));
    out.finish("classify", cfg)
}
