// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats: concept banks (JSON lines), replacement maps, scenarios,
//! rollout logs, subset lists, and tensor-archive views of feature maps,
//! policies, encoder weights and coefficient maps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use conceptdrive_core::concept::{ConceptBank, Replacement};
use conceptdrive_core::experiment::ConceptSubset;
use conceptdrive_core::policy::{Activation, PolicyConfig, PolicyParams};
use conceptdrive_core::sim::{Lane, Obstacle, Palette, RolloutRecord, Scenario, Segment};
use conceptdrive_core::vit::{EncoderWeights, NamedTensor, Pooling};
use conceptdrive_core::{FeatureMap, Provenance};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use crate::archive::{Archive, Tensor};
use crate::error::{format_err, Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err!("{}: {e}", path.display()))?;
    text.push('\n');
    write_text(path, &text)
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| format_err!("{}: {e}", path.display()))
}

/// A threshold that may be infinite. JSON has no infinities, so `±∞` travel
/// as the strings `"inf"` and `"-inf"`; finite values are plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(pub f64);

impl Threshold {
    pub fn parse(s: &str) -> Option<f64> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
            "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
            other => other.parse::<f64>().ok().filter(|v| !v.is_nan()),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            v if v == f64::INFINITY => s.serialize_str("inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match Value::deserialize(d)? {
            Value::Number(n) => n.as_f64().map(Threshold).ok_or_else(|| D::Error::custom("threshold out of range")),
            Value::String(s) => Threshold::parse(&s)
                .map(Threshold)
                .ok_or_else(|| D::Error::custom(format!("invalid threshold '{s}'"))),
            other => Err(D::Error::custom(format!("threshold must be a number or \"inf\"/\"-inf\", got {other}"))),
        }
    }
}

// ---- concept banks ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankLine {
    name: String,
    vector: Vec<f32>,
    #[serde(default)]
    roles: Vec<String>,
}

/// Parses a JSON-lines concept bank. Blank lines are skipped.
pub fn parse_bank(text: &str) -> Result<ConceptBank> {
    let mut entries = Vec::new();
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: BankLine = serde_json::from_str(line).map_err(|e| format_err!("bank line {}: {e}", i + 1))?;
        for role in &l.roles {
            match role.as_str() {
                "src" => src.push(l.name.clone()),
                "tgt" => tgt.push(l.name.clone()),
                other => return Err(format_err!("bank line {}: unknown role '{other}' for '{}'", i + 1, l.name)),
            }
        }
        entries.push((l.name, l.vector.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>()));
    }
    Ok(ConceptBank::new(entries, &src, &tgt)?)
}

pub fn read_bank(path: &Path) -> Result<ConceptBank> {
    parse_bank(&read_text(path)?).map_err(|e| format_err!("{}: {e}", path.display()))
}

pub fn bank_to_jsonl(bank: &ConceptBank) -> String {
    let mut out = String::new();
    for c in bank.entries() {
        let mut roles = Vec::new();
        if bank.sources().contains(&c.name) {
            roles.push("src".to_string());
        }
        if bank.targets().contains(&c.name) {
            roles.push("tgt".to_string());
        }
        let line = BankLine { name: c.name.clone(), vector: c.vector.clone(), roles };
        out.push_str(&serde_json::to_string(&line).expect("bank line serializes"));
        out.push('\n');
    }
    out
}

// ---- replacement maps ----

/// `{"source": {"target": weight, ...}, ...}`; rows are normalized.
pub fn parse_replacement_map(text: &str) -> Result<Replacement> {
    let raw: BTreeMap<String, BTreeMap<String, f64>> =
        serde_json::from_str(text).map_err(|e| format_err!("replacement map: {e}"))?;
    let rows = raw.into_iter().map(|(src, row)| (src, row.into_iter().collect())).collect();
    Ok(Replacement::from_weights(rows)?)
}

pub fn read_replacement_map(path: &Path) -> Result<Replacement> {
    parse_replacement_map(&read_text(path)?).map_err(|e| format_err!("{}: {e}", path.display()))
}

// ---- scenarios ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentFile {
    pub length: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneFile {
    pub segments: Vec<SegmentFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleFile {
    pub s: f64,
    pub offset: f64,
    pub radius: f64,
    pub concept: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteFile {
    pub road: String,
    pub lane_edge: String,
    pub obstacle: String,
    pub offroad: String,
    pub sky: String,
}

impl From<&Palette> for PaletteFile {
    fn from(p: &Palette) -> Self {
        Self {
            road: p.road.clone(),
            lane_edge: p.lane_edge.clone(),
            obstacle: p.obstacle.clone(),
            offroad: p.offroad.clone(),
            sky: p.sky.clone(),
        }
    }
}

impl From<PaletteFile> for Palette {
    fn from(p: PaletteFile) -> Self {
        Self { road: p.road, lane_edge: p.lane_edge, obstacle: p.obstacle, offroad: p.offroad, sky: p.sky }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub lane: LaneFile,
    pub half_width: f64,
    pub obstacles: Vec<ObstacleFile>,
    pub palette: PaletteFile,
    pub seed: u64,
    #[serde(default)]
    pub start_offset: f64,
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        Self {
            lane: LaneFile {
                segments: s.lane.segments.iter().map(|g| SegmentFile { length: g.length, curvature: g.curvature }).collect(),
            },
            half_width: s.half_width,
            obstacles: s
                .obstacles
                .iter()
                .map(|o| ObstacleFile { s: o.s, offset: o.offset, radius: o.radius, concept: o.concept.clone() })
                .collect(),
            palette: (&s.palette).into(),
            seed: s.seed,
            start_offset: s.start_offset,
        }
    }
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        let scenario = Scenario {
            lane: Lane { segments: self.lane.segments.into_iter().map(|g| Segment { length: g.length, curvature: g.curvature }).collect() },
            half_width: self.half_width,
            obstacles: self
                .obstacles
                .into_iter()
                .map(|o| Obstacle { s: o.s, offset: o.offset, radius: o.radius, concept: o.concept })
                .collect(),
            palette: self.palette.into(),
            start_offset: self.start_offset,
            seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let file: ScenarioFile = parse_json(path, &read_text(path)?)?;
    file.into_scenario().map_err(|e| format_err!("{}: {e}", path.display()))
}

// ---- rollout logs ----

/// One JSON object per step.
pub fn rollout_jsonl(rec: &RolloutRecord) -> String {
    let mut out = String::new();
    for s in &rec.steps {
        let line = json!({
            "step": s.step,
            "s": s.state.s,
            "d": s.state.d,
            "psi": s.state.psi,
            "v": s.state.v,
            "steering": s.control.steering,
            "teacher_steering": s.teacher.steering,
            "label": s.label.name(),
            "swaps": s.swaps,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

pub fn rollout_summary(rec: &RolloutRecord) -> Value {
    json!({
        "steps": rec.steps.len(),
        "horizon": rec.horizon,
        "soft_success": rec.soft_success,
        "failure": rec.outcome.map(|(kind, t)| json!({
            "kind": kind.name(),
            "step": t,
            "maneuver": rec.steps[t].label.name(),
        })),
    })
}

// ---- concept subsets ----

/// One row of a subset list: the concepts allowed as matches, the threshold
/// a match needs, and optional per-row trial count and seed. This is also
/// the shape of an exported debugging-console history entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetEntry {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(alias = "subset")]
    pub concepts: Vec<String>,
    #[serde(default = "neg_inf")]
    pub threshold: Threshold,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn neg_inf() -> Threshold {
    Threshold(f64::NEG_INFINITY)
}

impl SubsetEntry {
    pub fn to_subset(&self, index: usize) -> ConceptSubset {
        ConceptSubset {
            name: self.name.clone().unwrap_or_else(|| format!("row-{index}")),
            concepts: self.concepts.clone(),
            threshold: self.threshold.0,
        }
    }
}

/// A JSON array of [`SubsetEntry`], or an object holding it under
/// `"subsets"` or `"history"`.
pub fn parse_subsets(text: &str) -> Result<Vec<SubsetEntry>> {
    let value: Value = serde_json::from_str(text).map_err(|e| format_err!("subset list: {e}"))?;
    let list = match value {
        Value::Object(mut obj) => obj
            .remove("subsets")
            .or_else(|| obj.remove("history"))
            .ok_or_else(|| format_err!("subset list: expected an array or an object with \"subsets\" or \"history\""))?,
        other => other,
    };
    serde_json::from_value(list).map_err(|e| format_err!("subset list: {e}"))
}

pub fn read_subsets(path: &Path) -> Result<Vec<SubsetEntry>> {
    parse_subsets(&read_text(path)?).map_err(|e| format_err!("{}: {e}", path.display()))
}

// ---- tensor-archive views ----

pub fn feature_map_archive(map: &FeatureMap) -> Archive {
    let mut a = Archive::new();
    if let Some(p) = &map.provenance {
        a = a.with_meta("layer", p.layer).with_meta("mask_kind", p.mask_kind.clone()).with_meta("r", p.r);
    }
    a.push(Tensor { name: "features".into(), shape: vec![map.rows(), map.cols(), map.dim()], data: map.as_slice().to_vec() })
        .expect("fresh archive");
    a
}

pub fn feature_map_from_archive(a: &Archive) -> Result<FeatureMap> {
    let t = a.require("features")?;
    let [rows, cols, dim] = t.shape[..] else {
        return Err(format_err!("tensor 'features' must have shape [rows, cols, dim], got {:?}", t.shape));
    };
    let mut map = FeatureMap::new(rows, cols, dim, t.data.clone())?;
    if a.metadata.contains_key("layer") {
        map.provenance =
            Some(Provenance { layer: a.meta_usize("layer")?, mask_kind: a.meta_str("mask_kind")?.to_string(), r: a.meta_f64("r")? });
    }
    Ok(map)
}

/// Policy checkpoint. Parameters are stored as `f32`.
pub fn policy_archive(p: &PolicyParams) -> Archive {
    let c = &p.config;
    let mut a = Archive::new()
        .with_meta("hidden_dim", c.hidden)
        .with_meta("grid", vec![c.grid.0, c.grid.1])
        .with_meta("feature_dim", c.feature_dim)
        .with_meta("activation", activation_name(c.activation))
        .with_meta("max_steering", c.max_steering);
    for (name, shape, data) in p.blocks() {
        a.push(Tensor { name: name.into(), shape, data: data.iter().map(|&x| x as f32).collect() }).expect("distinct blocks");
    }
    a
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

pub fn policy_from_archive(a: &Archive) -> Result<PolicyParams> {
    let grid: Vec<usize> = serde_json::from_value(a.meta("grid")?.clone()).map_err(|e| format_err!("metadata 'grid': {e}"))?;
    let [rows, cols] = grid[..] else {
        return Err(format_err!("metadata 'grid' must be [rows, cols]"));
    };
    let mut config = PolicyConfig::new((rows, cols), a.meta_usize("feature_dim")?);
    config.hidden = a.meta_usize("hidden_dim")?;
    if a.metadata.contains_key("activation") {
        config.activation = match a.meta_str("activation")? {
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            other => return Err(format_err!("unknown activation '{other}'")),
        };
    }
    if a.metadata.contains_key("max_steering") {
        config.max_steering = a.meta_f64("max_steering")?;
    }
    let template = PolicyParams::zeros(config);
    let mut theta = Vec::with_capacity(config.param_count());
    for (name, shape, _) in template.blocks() {
        let t = a.require(name)?;
        if t.shape != shape {
            return Err(format_err!("tensor '{name}' has shape {:?}, the header implies {shape:?}", t.shape));
        }
        theta.extend(t.data.iter().map(|&x| f64::from(x)));
    }
    Ok(PolicyParams::from_theta(config, theta)?)
}

/// Encoder weights. Values must be `f32`-representable to round-trip.
pub fn encoder_archive(w: &EncoderWeights) -> Archive {
    let mut a = Archive::new().with_meta("pooling", w.config.pooling.name()).with_meta("ln_eps", w.config.ln_eps);
    for t in w.to_named() {
        a.push(Tensor { name: t.name, shape: t.shape, data: t.data.iter().map(|&x| x as f32).collect() }).expect("distinct names");
    }
    a
}

pub fn encoder_from_archive(a: &Archive) -> Result<EncoderWeights> {
    let pooling = match a.metadata.get("pooling") {
        Some(_) => Pooling::parse(a.meta_str("pooling")?)?,
        None => Pooling::Mean,
    };
    let named: Vec<NamedTensor> = a
        .tensors
        .iter()
        .map(|t| NamedTensor::new(t.name.clone(), t.shape.clone(), t.data.iter().map(|&x| f64::from(x)).collect()))
        .collect();
    let mut w = EncoderWeights::from_named(&named, pooling)?;
    if a.metadata.contains_key("ln_eps") {
        w.config.ln_eps = a.meta_f64("ln_eps")?;
    }
    Ok(w)
}

/// Coefficient maps `[classes, k, rows, cols]`.
pub fn coefficient_archive(maps: &[f64], classes: usize, k: usize, grid: (usize, usize)) -> Result<Archive> {
    let mut a = Archive::new();
    a.push(Tensor::new("coefficients", vec![classes, k, grid.0, grid.1], maps.iter().map(|&x| x as f32).collect())?)?;
    Ok(a)
}

pub fn append_line(file: &mut impl Write, line: &str) -> std::io::Result<()> {
    file.write_all(line.as_bytes())?;
    file.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use conceptdrive_core::concept::synth_bank;

    #[test]
    fn bank_round_trip() {
        let bank = synth_bank(&["road", "tree", "house"], 3, 16, &["tree"], &["house"]).unwrap();
        let back = parse_bank(&bank_to_jsonl(&bank)).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn bank_errors() {
        let dup = "{\"name\":\"a\",\"vector\":[1,0]}\n{\"name\":\"a\",\"vector\":[0,1]}\n";
        assert!(parse_bank(dup).is_err());
        let dim = "{\"name\":\"a\",\"vector\":[1,0]}\n{\"name\":\"b\",\"vector\":[0,1,0]}\n";
        assert!(parse_bank(dim).is_err());
        let role = "{\"name\":\"a\",\"vector\":[1,0],\"roles\":[\"dst\"]}\n";
        assert!(parse_bank(role).unwrap_err().to_string().contains("dst"));
    }

    #[test]
    fn thresholds_survive_json() {
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.25] {
            let s = serde_json::to_string(&Threshold(v)).unwrap();
            assert_eq!(serde_json::from_str::<Threshold>(&s).unwrap().0, v);
        }
        assert!(serde_json::from_str::<Threshold>("\"nan\"").is_err());
    }

    #[test]
    fn subset_lists_accept_history_exports() {
        let list = parse_subsets(r#"[{"name":"a","concepts":["road"]}]"#).unwrap();
        assert_eq!(list[0].threshold.0, f64::NEG_INFINITY);
        let hist = parse_subsets(r#"{"history":[{"subset":["road"],"threshold":"inf","trials":3,"seed":1}]}"#).unwrap();
        assert_eq!(hist[0].to_subset(0).name, "row-0");
        assert_eq!(hist[0].threshold.0, f64::INFINITY);
        assert!(parse_subsets(r#"[{"concepts":["road"],"bogus":1}]"#).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn replacement_rows_normalize() {
        let Replacement::Map(rows) = parse_replacement_map(r#"{"tree":{"house":3,"shop":1}}"#).unwrap() else {
            panic!("map expected")
        };
        assert_eq!(rows["tree"], vec![("house".to_string(), 0.75), ("shop".to_string(), 0.25)]);
        assert!(parse_replacement_map(r#"{"tree":{"house":-1}}"#).is_err());
    }

    #[test]
    fn policy_checkpoint_keeps_f32_values() {
        let p = PolicyParams::seeded(PolicyConfig::new((2, 3), 4), 9);
        let a = Archive::from_bytes(&policy_archive(&p).to_bytes()).unwrap();
        assert_eq!(a.meta_usize("hidden_dim").unwrap(), 32);
        let q = policy_from_archive(&a).unwrap();
        assert_eq!(q.config, p.config);
        for (x, y) in p.theta.iter().zip(&q.theta) {
            assert_eq!(*y, f64::from(*x as f32));
        }
    }
}
