// SPDX-License-Identifier: MIT OR Apache-2.0

//! A toy lane-following simulator in road (Frenet) coordinates.
//!
//! The ego car moves at constant speed with kinematics
//! `ṡ = v·cos ψ`, `ḋ = v·sin ψ`, `ψ̇ = v·u − v·κ(s)` (explicit Euler), where
//! `u` is the steering curvature. Observations are concept grids: each cell
//! names what a small patch of the forward view shows (sky, road, lane edge,
//! off-road, or an obstacle), and [`embed_scene`] turns those names into a
//! feature map through a concept bank.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::concept::{substitute, ConceptBank, SubstitutionRule};
use crate::error::{bail, Result};
use crate::feature::FeatureMap;
use crate::policy::{policy_forward, Control, Maneuver, PolicyParams};
use crate::rng;

/// A constant-curvature piece of the lane centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub length: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub segments: Vec<Segment>,
}

impl Lane {
    pub fn straight(length: f64) -> Self {
        Self { segments: vec![Segment { length, curvature: 0.0 }] }
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// `κ(s)`; the last segment extends past the end of the lane.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let mut start = 0.0;
        for seg in &self.segments {
            if s < start + seg.length {
                return seg.curvature;
            }
            start += seg.length;
        }
        self.segments.last().map_or(0.0, |seg| seg.curvature)
    }

    /// Lateral offset of the centerline at `s + ahead` relative to the straight
    /// tangent line at `s`: `∫₀^ahead (ahead − t)·κ(s + t) dt` (small-angle).
    pub fn lateral_drift(&self, s: f64, ahead: f64) -> f64 {
        let mut total = 0.0;
        let mut start = 0.0;
        let end = s + ahead;
        let n = self.segments.len();
        for (k, seg) in self.segments.iter().enumerate() {
            let seg_end = if k + 1 == n { f64::INFINITY } else { start + seg.length };
            let lo = s.max(start);
            let hi = end.min(seg_end);
            if hi > lo {
                let (a, b) = (lo - s, hi - s);
                total += seg.curvature * ((ahead - a) * (ahead - a) - (ahead - b) * (ahead - b)) / 2.0;
            }
            start += seg.length;
        }
        total
    }
}

/// Scene roles the renderer distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SceneRole {
    Road,
    LaneEdge,
    Obstacle,
    Offroad,
    Sky,
}

impl SceneRole {
    pub const ALL: [SceneRole; 5] =
        [SceneRole::Road, SceneRole::LaneEdge, SceneRole::Obstacle, SceneRole::Offroad, SceneRole::Sky];

    pub fn name(self) -> &'static str {
        match self {
            SceneRole::Road => "road",
            SceneRole::LaneEdge => "lane_edge",
            SceneRole::Obstacle => "obstacle",
            SceneRole::Offroad => "offroad",
            SceneRole::Sky => "sky",
        }
    }
}

/// Scene role → concept name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub road: String,
    pub lane_edge: String,
    pub obstacle: String,
    pub offroad: String,
    pub sky: String,
}

impl Palette {
    pub fn concept(&self, role: SceneRole) -> &str {
        match role {
            SceneRole::Road => &self.road,
            SceneRole::LaneEdge => &self.lane_edge,
            SceneRole::Obstacle => &self.obstacle,
            SceneRole::Offroad => &self.offroad,
            SceneRole::Sky => &self.sky,
        }
    }

    pub fn set(&mut self, role: SceneRole, name: &str) {
        let slot = match role {
            SceneRole::Road => &mut self.road,
            SceneRole::LaneEdge => &mut self.lane_edge,
            SceneRole::Obstacle => &mut self.obstacle,
            SceneRole::Offroad => &mut self.offroad,
            SceneRole::Sky => &mut self.sky,
        };
        *slot = name.to_string();
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            road: "road".into(),
            lane_edge: "lane marking".into(),
            obstacle: "car".into(),
            offroad: "tree".into(),
            sky: "sky".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    /// Arc position of the center (m).
    pub s: f64,
    /// Lateral offset of the center from the centerline (m).
    pub offset: f64,
    pub radius: f64,
    pub concept: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub lane: Lane,
    pub half_width: f64,
    pub obstacles: Vec<Obstacle>,
    pub palette: Palette,
    /// Initial lateral offset of the ego car.
    pub start_offset: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0) {
            bail!(Config, "lane half-width must be positive");
        }
        if self.lane.segments.is_empty() || self.lane.segments.iter().any(|s| !(s.length > 0.0)) {
            bail!(Config, "lane needs segments of positive length");
        }
        let max_curv = 1.0 / (2.0 * self.half_width);
        if let Some(seg) = self.lane.segments.iter().find(|s| !(s.curvature.abs() < max_curv)) {
            bail!(Config, "curvature {} too sharp for half-width {}", seg.curvature, self.half_width);
        }
        if let Some(o) = self.obstacles.iter().find(|o| !(o.radius > 0.0 && o.radius < self.half_width)) {
            bail!(Config, "obstacle radius {} must lie in (0, half-width)", o.radius);
        }
        if !(self.start_offset.abs() < self.half_width) {
            bail!(Config, "start offset {} leaves the lane", self.start_offset);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    /// Arc position (m).
    pub s: f64,
    /// Lateral offset (m).
    pub d: f64,
    /// Heading error (rad).
    pub psi: f64,
    /// Speed (m/s).
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureKind {
    LaneDeparture,
    Collision,
    HeadingDeviation,
}

impl FailureKind {
    pub fn name(self) -> &'static str {
        match self {
            FailureKind::LaneDeparture => "lane_departure",
            FailureKind::Collision => "collision",
            FailureKind::HeadingDeviation => "heading_deviation",
        }
    }
}

/// Teacher gains and state-machine windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub k_lateral: f64,
    pub k_heading: f64,
    /// Obstacles closer than this (ahead) trigger avoidance (m).
    pub trigger_distance: f64,
    /// Distance over which the lateral target ramps to the full shift (m).
    pub ramp_distance: f64,
    /// Phase after passing an obstacle (s).
    pub recovery_window: f64,
    /// Distance over which the target returns to the centerline (m).
    pub return_distance: f64,
    /// Required gap between the ego path and an obstacle's edge (m).
    pub clearance: f64,
    /// Keep-in margin from the lane boundary for shifted targets (m).
    pub boundary_margin: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            k_lateral: 0.4,
            k_heading: 1.0,
            trigger_distance: 10.0,
            ramp_distance: 7.0,
            recovery_window: 3.0,
            return_distance: 10.0,
            clearance: 0.7,
            boundary_margin: 0.3,
        }
    }
}

/// Forward-view geometry of the concept grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub rows: usize,
    pub cols: usize,
    /// Number of top rows that always show sky.
    pub sky_rows: usize,
    /// Distance bands `(near, far)` of the ground rows, top row first (m).
    pub bands: Vec<(f64, f64)>,
    /// Lateral half-extent at distance `L` is `base + L·spread` (m).
    pub lateral_base: f64,
    pub lateral_spread: f64,
    /// Half-width of the band around each lane boundary shown as lane edge (m).
    pub edge_band: f64,
    /// Lateral samples per cell for the road / edge / off-road decision.
    pub samples: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 8,
            sky_rows: 1,
            bands: vec![(18.0, 26.0), (12.0, 18.0), (8.0, 12.0), (4.0, 8.0), (1.0, 4.0)],
            lateral_base: 2.0,
            lateral_spread: 0.3,
            edge_band: 0.3,
            samples: 3,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.samples == 0 {
            bail!(Config, "view grid must be non-empty");
        }
        if self.sky_rows + self.bands.len() != self.rows {
            bail!(Config, "{} sky rows + {} distance bands != {} rows", self.sky_rows, self.bands.len(), self.rows);
        }
        if self.bands.iter().any(|(a, b)| !(0.0 < *a && a < b)) {
            bail!(Config, "distance bands must satisfy 0 < near < far");
        }
        Ok(())
    }

    fn half_extent(&self, band: (f64, f64)) -> f64 {
        self.lateral_base + 0.5 * (band.0 + band.1) * self.lateral_spread
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: usize,
    pub speed: f64,
    pub max_heading: f64,
    pub view: ViewConfig,
    pub teacher: TeacherConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 200,
            speed: 5.0,
            max_heading: core::f64::consts::PI / 6.0,
            view: ViewConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

/// What a grid cell shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Sky,
    Road,
    LaneEdge,
    Offroad,
    /// Index into the scenario's obstacles.
    Obstacle(usize),
}

/// A rendered `rows × cols` view (row 0 at the top).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
}

impl ConceptGrid {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn role(&self, j: usize) -> SceneRole {
        match self.cells[j] {
            Cell::Sky => SceneRole::Sky,
            Cell::Road => SceneRole::Road,
            Cell::LaneEdge => SceneRole::LaneEdge,
            Cell::Offroad => SceneRole::Offroad,
            Cell::Obstacle(_) => SceneRole::Obstacle,
        }
    }

    /// Concept name of every cell.
    pub fn names<'a>(&self, scenario: &'a Scenario) -> Vec<&'a str> {
        self.cells
            .iter()
            .map(|c| match c {
                Cell::Sky => scenario.palette.sky.as_str(),
                Cell::Road => scenario.palette.road.as_str(),
                Cell::LaneEdge => scenario.palette.lane_edge.as_str(),
                Cell::Offroad => scenario.palette.offroad.as_str(),
                Cell::Obstacle(k) => scenario.obstacles[*k].concept.as_str(),
            })
            .collect()
    }
}

/// Ray-casts the forward view. Ground cell `(row, col)` covers a distance
/// band and a lateral interval in the ego frame; a cell shows an obstacle
/// when the obstacle disc overlaps it, otherwise lane edge if any lateral
/// sample lies within `edge_band` of a lane boundary, otherwise the majority
/// of road vs off-road samples (ties go to road).
pub fn render_concept_grid(state: &EgoState, scenario: &Scenario, view: &ViewConfig) -> Result<ConceptGrid> {
    view.validate()?;
    let mut cells = vec![Cell::Sky; view.rows * view.cols];
    let hw = scenario.half_width;
    let (sin_psi, cos_psi) = (libm::sin(state.psi), libm::cos(state.psi));
    // obstacle centers in the ego frame (along-track, lateral)
    let obstacles: Vec<(f64, f64, f64)> = scenario
        .obstacles
        .iter()
        .map(|o| {
            let ahead = o.s - state.s;
            let lateral = o.offset + scenario.lane.lateral_drift(state.s, ahead.max(0.0)) - state.d - ahead * sin_psi;
            (ahead, lateral, o.radius)
        })
        .collect();
    for (b, &band) in view.bands.iter().enumerate() {
        let row = view.sky_rows + b;
        let x_half = view.half_extent(band);
        let width = 2.0 * x_half / view.cols as f64;
        let mid = 0.5 * (band.0 + band.1);
        let drift = scenario.lane.lateral_drift(state.s, mid);
        for col in 0..view.cols {
            let (x_lo, x_hi) = (-x_half + col as f64 * width, -x_half + (col + 1) as f64 * width);
            let hit = obstacles.iter().position(|&(l, x, r)| {
                let dl = l - l.clamp(band.0, band.1);
                let dx = x - x.clamp(x_lo, x_hi);
                dl * dl + dx * dx < r * r
            });
            let cell = if let Some(k) = hit {
                Cell::Obstacle(k)
            } else {
                let (mut road, mut off, mut edge) = (0usize, 0usize, false);
                for k in 0..view.samples {
                    let x = x_lo + (k as f64 + 0.5) * width / view.samples as f64;
                    let d = state.d + mid * sin_psi + x * cos_psi - drift;
                    if (d.abs() - hw).abs() <= view.edge_band {
                        edge = true;
                    } else if d.abs() < hw {
                        road += 1;
                    } else {
                        off += 1;
                    }
                }
                if edge {
                    Cell::LaneEdge
                } else if road >= off {
                    Cell::Road
                } else {
                    Cell::Offroad
                }
            };
            cells[row * view.cols + col] = cell;
        }
    }
    Ok(ConceptGrid { rows: view.rows, cols: view.cols, cells })
}

/// Feature map of a named grid: each cell is its concept vector plus
/// per-component Gaussian noise of standard deviation `sigma`, renormalized.
/// With `sigma == 0` cells are exactly the bank vectors.
pub fn embed_scene(
    names: &[&str],
    rows: usize,
    cols: usize,
    bank: &ConceptBank,
    sigma: f64,
    seed: u64,
) -> Result<FeatureMap> {
    if names.len() != rows * cols {
        bail!(Dimension, "{} names for a {rows}x{cols} grid", names.len());
    }
    let dim = bank.dim();
    let mut data = Vec::with_capacity(names.len() * dim);
    for (j, name) in names.iter().enumerate() {
        let Some(v) = bank.get(name) else {
            bail!(Validation, "scene concept '{name}' is not in the bank");
        };
        if sigma == 0.0 {
            data.extend_from_slice(v);
            continue;
        }
        let mut r = rng::stream(seed, &[0xE4B, j as u64]);
        let noisy: Vec<f64> = v.iter().map(|&x| f64::from(x) + sigma * rng::normal(&mut r)).collect();
        let n = libm::sqrt(noisy.iter().map(|x| x * x).sum::<f64>());
        data.extend(noisy.iter().map(|x| (x / n) as f32));
    }
    FeatureMap::new(rows, cols, dim, data)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Lateral position that passes `o` on the left (positive offset), kept
/// inside the lane. A fixed side keeps the demonstrations unimodal: with a
/// nearest-room rule, obstacles near the centerline would be passed on
/// either side depending on offsets the grid cannot resolve.
fn pass_target(o: &Obstacle, scenario: &Scenario, cfg: &TeacherConfig) -> f64 {
    let limit = scenario.half_width - cfg.boundary_margin;
    (o.offset + o.radius + cfg.clearance).min(limit)
}

/// Maneuver phase from geometry: avoidance while an obstacle is within the
/// trigger distance ahead, recovery for `recovery_window` seconds of travel
/// after passing one, lane-stable otherwise.
pub fn maneuver_phase(state: &EgoState, scenario: &Scenario, cfg: &TeacherConfig) -> Maneuver {
    let recovery = state.v * cfg.recovery_window;
    let mut phase = Maneuver::LaneStable;
    for o in &scenario.obstacles {
        let ahead = o.s - state.s;
        if (0.0..=cfg.trigger_distance).contains(&ahead) {
            return Maneuver::Avoidance;
        }
        if ahead < 0.0 && -ahead <= recovery {
            phase = Maneuver::Recovery;
        }
    }
    phase
}

/// Lateral target of the teacher at `state`.
pub fn teacher_target(state: &EgoState, scenario: &Scenario, cfg: &TeacherConfig) -> f64 {
    let mut best = (0.0, 0.0);
    for o in &scenario.obstacles {
        let ahead = o.s - state.s;
        let weight = if ahead >= 0.0 {
            smoothstep((cfg.trigger_distance - ahead) / cfg.ramp_distance)
        } else {
            1.0 - smoothstep(-ahead / cfg.return_distance)
        };
        if weight > best.0 {
            best = (weight, weight * pass_target(o, scenario, cfg));
        }
    }
    best.1
}

/// Rule-based teacher: curvature feedforward plus proportional lateral and
/// heading feedback toward a target that shifts to pass obstacles.
pub fn teacher_control(state: &EgoState, scenario: &Scenario, cfg: &SimConfig) -> (Control, Maneuver) {
    let t = &cfg.teacher;
    let target = teacher_target(state, scenario, t);
    let raw = scenario.lane.curvature_at(state.s) - t.k_lateral * (state.d - target) - t.k_heading * state.psi;
    let max = crate::policy::PolicyConfig::new((1, 1), 1).max_steering;
    (Control::steer(raw.clamp(-max, max)), maneuver_phase(state, scenario, t))
}

/// One explicit Euler step of the kinematics.
pub fn step(state: &EgoState, u: &Control, dt: f64, lane: &Lane) -> Result<EgoState> {
    if !(dt > 0.0) {
        bail!(Config, "time step must be positive (got {dt})");
    }
    let EgoState { s, d, psi, v } = *state;
    Ok(EgoState {
        s: s + v * libm::cos(psi) * dt,
        d: d + v * libm::sin(psi) * dt,
        psi: psi + (v * u.steering - v * lane.curvature_at(s)) * dt,
        v,
    })
}

/// Failure with precedence collision > lane departure > heading deviation.
/// All boundaries are strict: touching a limit is not a failure.
pub fn check_failure(state: &EgoState, scenario: &Scenario, max_heading: f64) -> Option<FailureKind> {
    let hit = scenario.obstacles.iter().any(|o| {
        let (ds, dd) = (state.s - o.s, state.d - o.offset);
        libm::sqrt(ds * ds + dd * dd) < o.radius
    });
    if hit {
        Some(FailureKind::Collision)
    } else if state.d.abs() > scenario.half_width {
        Some(FailureKind::LaneDeparture)
    } else if state.psi.abs() > max_heading {
        Some(FailureKind::HeadingDeviation)
    } else {
        None
    }
}

/// Who drives.
#[derive(Debug, Clone, Copy)]
pub enum Driver<'a> {
    Teacher,
    /// Teacher plus Gaussian steering noise (for data collection); the clean
    /// teacher command is still recorded as the label.
    NoisyTeacher { sigma: f64, seed: u64 },
    Policy(&'a PolicyParams),
    Constant(Control),
}

/// How observations are produced from the rendered grid.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePipeline<'a> {
    pub bank: &'a ConceptBank,
    pub noise_sigma: f64,
    /// Optional latent-space substitution applied to every observation.
    pub substitution: Option<(&'a ConceptBank, &'a SubstitutionRule)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// State before the step.
    pub state: EgoState,
    /// Command executed.
    pub control: Control,
    /// Teacher command at this state.
    pub teacher: Control,
    pub label: Maneuver,
    /// Cells replaced by the substitution stage.
    pub swaps: usize,
    pub features: Option<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub steps: Vec<StepRecord>,
    /// Failure kind and the step at which it happened.
    pub outcome: Option<(FailureKind, usize)>,
    pub horizon: usize,
    pub soft_success: f64,
}

impl RolloutRecord {
    /// Maneuver label at the failure step.
    pub fn failure_label(&self) -> Option<Maneuver> {
        self.outcome.map(|(_, t)| self.steps[t].label)
    }
}

/// Initial ego state of a scenario.
pub fn start_state(scenario: &Scenario, cfg: &SimConfig) -> EgoState {
    EgoState { s: 0.0, d: scenario.start_offset, psi: 0.0, v: cfg.speed }
}

/// Observation at `state` (step `t`).
pub fn observe(
    state: &EgoState,
    scenario: &Scenario,
    cfg: &SimConfig,
    pipeline: &FeaturePipeline<'_>,
    t: usize,
) -> Result<(FeatureMap, usize)> {
    let grid = render_concept_grid(state, scenario, &cfg.view)?;
    let names = grid.names(scenario);
    let seed = rng::derive(pipeline.seed, t as u64);
    let map = embed_scene(&names, grid.rows, grid.cols, pipeline.bank, pipeline.noise_sigma, seed)?;
    match pipeline.substitution {
        None => Ok((map, 0)),
        Some((bank, rule)) => {
            let (map, swaps) = substitute(&map, bank, rule, rng::derive(seed, 0x5B))?;
            Ok((map, swaps.len()))
        }
    }
}

/// Closed loop: render → embed (→ substitute) → control → step → check,
/// until failure or `cfg.horizon` steps.
pub fn rollout(
    driver: Driver<'_>,
    scenario: &Scenario,
    cfg: &SimConfig,
    pipeline: &FeaturePipeline<'_>,
    record_features: bool,
) -> Result<RolloutRecord> {
    scenario.validate()?;
    if cfg.horizon == 0 {
        bail!(Config, "horizon must be positive");
    }
    let mut state = start_state(scenario, cfg);
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut outcome = None;
    let mut noise = match driver {
        Driver::NoisyTeacher { seed, .. } => Some(rng::stream(seed, &[0xD0, scenario.seed])),
        _ => None,
    };
    for t in 0..cfg.horizon {
        let (teacher, label) = teacher_control(&state, scenario, cfg);
        let needs_features = record_features || matches!(driver, Driver::Policy(_));
        let (features, swaps) = if needs_features {
            let (f, n) = observe(&state, scenario, cfg, pipeline, t)?;
            (Some(f), n)
        } else {
            (None, 0)
        };
        let control = match driver {
            Driver::Teacher => teacher,
            Driver::NoisyTeacher { sigma, .. } => {
                let r = noise.as_mut().expect("noise stream for noisy teacher");
                Control::steer(teacher.steering + sigma * rng::normal(r))
            }
            Driver::Policy(p) => policy_forward(p, features.as_ref().expect("policy observations"))?,
            Driver::Constant(c) => c,
        };
        let next = step(&state, &control, cfg.dt, &scenario.lane)?;
        steps.push(StepRecord {
            step: t,
            state,
            control,
            teacher,
            label,
            swaps,
            features: if record_features { features } else { None },
        });
        state = next;
        if let Some(kind) = check_failure(&state, scenario, cfg.max_heading) {
            outcome = Some((kind, t));
            break;
        }
    }
    let survived = outcome.map_or(cfg.horizon, |(_, t)| t);
    Ok(RolloutRecord { steps, outcome, horizon: cfg.horizon, soft_success: survived as f64 / cfg.horizon as f64 })
}

/// Random scenario generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFamily {
    pub lane_length: f64,
    pub segment_length: (f64, f64),
    pub max_curvature: f64,
    pub half_width: f64,
    pub obstacle_count: (usize, usize),
    pub first_obstacle: f64,
    pub obstacle_spacing: (f64, f64),
    pub obstacle_offset: f64,
    pub obstacle_radius: (f64, f64),
    pub max_start_offset: f64,
    pub palette: Palette,
    /// Obstacle concepts, drawn uniformly per obstacle.
    pub obstacle_concepts: Vec<String>,
    /// Off-road concepts, drawn once per scenario.
    pub offroad_concepts: Vec<String>,
}

impl Default for ScenarioFamily {
    fn default() -> Self {
        let palette = Palette::default();
        Self {
            lane_length: 140.0,
            segment_length: (20.0, 40.0),
            max_curvature: 0.02,
            half_width: 1.8,
            obstacle_count: (1, 3),
            first_obstacle: 25.0,
            obstacle_spacing: (30.0, 36.0),
            obstacle_offset: 0.5,
            obstacle_radius: (0.3, 0.6),
            max_start_offset: 0.3,
            obstacle_concepts: vec![palette.obstacle.clone()],
            offroad_concepts: vec![palette.offroad.clone()],
            palette,
        }
    }
}

impl ScenarioFamily {
    /// Scenario `index` of the family under `seed`.
    pub fn generate(&self, seed: u64, index: u64) -> Scenario {
        let scenario_seed = rng::derive(seed, index);
        let mut r = rng::stream(scenario_seed, &[0x5CE]);
        let mut segments = Vec::new();
        let mut total = 0.0;
        while total < self.lane_length {
            let length = rng::uniform(&mut r, self.segment_length.0, self.segment_length.1);
            let curvature = rng::uniform(&mut r, -self.max_curvature, self.max_curvature);
            segments.push(Segment { length, curvature });
            total += length;
        }
        let pick = |r: &mut rng::StreamRng, names: &[String], fallback: &str| -> String {
            if names.is_empty() {
                fallback.to_string()
            } else {
                use rand::Rng;
                names[r.random_range(0..names.len())].clone()
            }
        };
        let mut palette = self.palette.clone();
        palette.offroad = pick(&mut r, &self.offroad_concepts, &self.palette.offroad);
        let count = {
            use rand::Rng;
            r.random_range(self.obstacle_count.0..=self.obstacle_count.1)
        };
        let mut obstacles = Vec::with_capacity(count);
        let mut s = self.first_obstacle + rng::uniform(&mut r, 0.0, 5.0);
        for _ in 0..count {
            obstacles.push(Obstacle {
                s,
                offset: rng::uniform(&mut r, -self.obstacle_offset, self.obstacle_offset),
                radius: rng::uniform(&mut r, self.obstacle_radius.0, self.obstacle_radius.1),
                concept: pick(&mut r, &self.obstacle_concepts, &self.palette.obstacle),
            });
            s += rng::uniform(&mut r, self.obstacle_spacing.0, self.obstacle_spacing.1);
        }
        let start_offset = rng::uniform(&mut r, -self.max_start_offset, self.max_start_offset);
        Scenario {
            lane: Lane { segments },
            half_width: self.half_width,
            obstacles,
            palette,
            start_offset,
            seed: scenario_seed,
        }
    }

    /// Every concept name the family can render.
    pub fn concepts(&self) -> Vec<String> {
        let mut names: Vec<String> = vec![
            self.palette.road.clone(),
            self.palette.lane_edge.clone(),
            self.palette.sky.clone(),
            self.palette.obstacle.clone(),
            self.palette.offroad.clone(),
        ];
        names.extend(self.obstacle_concepts.iter().cloned());
        names.extend(self.offroad_concepts.iter().cloned());
        names.sort();
        names.dedup();
        names
    }
}

/// Aggregate closed-loop performance.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_soft_success: f64,
    /// Lost soft-success mass attributed to the maneuver at the failure
    /// step, indexed by [`Maneuver::index`]. `mean + Σ breakdown = 1`.
    pub breakdown: [f64; 3],
    pub per_trial: Vec<f64>,
    pub failures: Vec<Option<(FailureKind, Maneuver)>>,
}

impl Evaluation {
    /// Aggregates per-trial outcomes; the result does not depend on order.
    pub fn from_rollouts(records: &[RolloutRecord]) -> Result<Self> {
        if records.is_empty() {
            bail!(Config, "evaluation needs at least one trial");
        }
        let n = records.len() as f64;
        let mut breakdown = [0.0; 3];
        let mut failures = Vec::with_capacity(records.len());
        for r in records {
            let fail = r.outcome.map(|(k, _)| (k, r.failure_label().expect("failure step recorded")));
            if let Some((_, label)) = fail {
                breakdown[label.index()] += (1.0 - r.soft_success) / n;
            }
            failures.push(fail);
        }
        let per_trial: Vec<f64> = records.iter().map(|r| r.soft_success).collect();
        let mean_soft_success = per_trial.iter().sum::<f64>() / n;
        Ok(Self { mean_soft_success, breakdown, per_trial, failures })
    }
}

/// Runs `trials` scenarios from `family`; trial `i` uses scenario `(seed, i)`
/// and observation stream `(seed, i)`.
pub fn evaluate(
    driver: Driver<'_>,
    family: &ScenarioFamily,
    trials: usize,
    seed: u64,
    cfg: &SimConfig,
    pipeline: &FeaturePipeline<'_>,
) -> Result<Evaluation> {
    if trials == 0 {
        bail!(Config, "trials must be positive");
    }
    let records = (0..trials)
        .map(|i| {
            let scenario = family.generate(seed, i as u64);
            let p = FeaturePipeline { seed: rng::derive(pipeline.seed, i as u64), ..*pipeline };
            let driver = match driver {
                Driver::NoisyTeacher { sigma, seed } => Driver::NoisyTeacher { sigma, seed: rng::derive(seed, i as u64) },
                other => other,
            };
            rollout(driver, &scenario, cfg, &p, false)
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_rollouts(&records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::synth_bank;

    fn straight_scenario() -> Scenario {
        Scenario {
            lane: Lane::straight(200.0),
            half_width: 1.8,
            obstacles: vec![],
            palette: Palette::default(),
            start_offset: 0.0,
            seed: 0,
        }
    }

    fn state(d: f64, psi: f64) -> EgoState {
        EgoState { s: 0.0, d, psi, v: 5.0 }
    }

    #[test]
    fn centered_view_is_symmetric() {
        let sc = straight_scenario();
        let view = ViewConfig::default();
        let g = render_concept_grid(&state(0.0, 0.0), &sc, &view).unwrap();
        for c in 0..8 {
            assert_eq!(g.at(0, c), Cell::Sky);
        }
        let near = view.rows - 1;
        assert_eq!(g.at(near, 0), Cell::Offroad);
        assert_eq!(g.at(near, 7), Cell::Offroad);
        for c in 2..6 {
            assert_eq!(g.at(near, c), Cell::Road);
        }
        for r in 0..view.rows {
            for c in 0..4 {
                assert_eq!(g.at(r, c), g.at(r, 7 - c), "row {r} col {c}");
            }
        }
    }

    #[test]
    fn ego_on_boundary_sees_one_edge() {
        let sc = straight_scenario();
        let view = ViewConfig::default();
        let g = render_concept_grid(&state(1.8, 0.0), &sc, &view).unwrap();
        // hand ray-cast of the nearest row: half-extent 2.75 m, cells 0.6875 m;
        // lane boundary +1.8 is at x = 0, boundary -1.8 at x = -3.6 (out of view)
        let near = view.rows - 1;
        let edges: Vec<usize> = (0..8).filter(|&c| g.at(near, c) == Cell::LaneEdge).collect();
        assert_eq!(edges, vec![3, 4]);
        for c in 0..3 {
            assert_eq!(g.at(near, c), Cell::Road);
        }
        for c in 5..8 {
            assert_eq!(g.at(near, c), Cell::Offroad);
        }
    }

    #[test]
    fn obstacle_ahead_is_visible() {
        let mut sc = straight_scenario();
        sc.obstacles.push(Obstacle { s: 6.0, offset: 0.0, radius: 0.5, concept: "car".into() });
        let view = ViewConfig::default();
        let g = render_concept_grid(&state(0.0, 0.0), &sc, &view).unwrap();
        let hits: Vec<(usize, usize)> = (0..view.rows)
            .flat_map(|r| (0..8).map(move |c| (r, c)))
            .filter(|&(r, c)| g.at(r, c) == Cell::Obstacle(0))
            .collect();
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|&(r, c)| r == 4 && (3..=4).contains(&c)), "{hits:?}");
        // and invisible once behind
        let g = render_concept_grid(&EgoState { s: 8.0, ..state(0.0, 0.0) }, &sc, &view).unwrap();
        assert!(g.cells.iter().all(|c| !matches!(c, Cell::Obstacle(_))));
    }

    #[test]
    fn embed_zero_noise_round_trip() {
        let names = ["road", "sky", "tree", "car"];
        let bank = synth_bank(&names, 2, 32, &names, &[]).unwrap();
        let map = embed_scene(&["sky", "road", "tree", "car"], 2, 2, &bank, 0.0, 1).unwrap();
        let back: Vec<String> = crate::concept::match_cells(&map, &bank, crate::concept::Similarity::Cosine)
            .unwrap()
            .into_iter()
            .map(|m| m.name)
            .collect();
        assert_eq!(back, vec!["sky", "road", "tree", "car"]);
        let a = embed_scene(&["sky", "road", "tree", "car"], 2, 2, &bank, 0.05, 9).unwrap();
        let b = embed_scene(&["sky", "road", "tree", "car"], 2, 2, &bank, 0.05, 9).unwrap();
        assert_eq!(a, b);
        assert!(embed_scene(&["house"; 4], 2, 2, &bank, 0.0, 1).is_err());
    }

    #[test]
    fn teacher_examples() {
        let sc = straight_scenario();
        let cfg = SimConfig::default();
        let (u, label) = teacher_control(&state(0.0, 0.0), &sc, &cfg);
        assert_eq!((u.steering, label), (0.0, Maneuver::LaneStable));
        let (u, _) = teacher_control(&state(0.5, 0.0), &sc, &cfg);
        assert!((u.steering + 0.2).abs() < 1e-12);
    }

    #[test]
    fn teacher_recenters_within_ten_seconds() {
        let sc = straight_scenario();
        let cfg = SimConfig::default();
        let mut s = state(1.0, 0.0);
        for _ in 0..100 {
            let (u, _) = teacher_control(&s, &sc, &cfg);
            s = step(&s, &u, cfg.dt, &sc.lane).unwrap();
        }
        assert!(s.d.abs() < 0.05, "d = {}", s.d);
    }

    #[test]
    fn straight_motion() {
        let lane = Lane::straight(100.0);
        let s = step(&state(0.3, 0.0), &Control::steer(0.0), 0.1, &lane).unwrap();
        assert_eq!((s.s, s.d, s.psi, s.v), (0.5, 0.3, 0.0, 5.0));
        assert!(step(&s, &Control::steer(0.0), 0.0, &lane).is_err());
    }

    #[test]
    fn failure_rules() {
        let mut sc = straight_scenario();
        assert_eq!(check_failure(&state(1.8, 0.0), &sc, core::f64::consts::PI / 6.0), None);
        assert_eq!(check_failure(&state(-1.8001, 0.0), &sc, 0.5236), Some(FailureKind::LaneDeparture));
        let deg31 = 31.0_f64.to_radians();
        assert_eq!(check_failure(&state(0.0, deg31), &sc, core::f64::consts::PI / 6.0), Some(FailureKind::HeadingDeviation));
        sc.obstacles.push(Obstacle { s: 0.0, offset: 1.7, radius: 0.5, concept: "car".into() });
        assert_eq!(check_failure(&state(1.9, deg31), &sc, core::f64::consts::PI / 6.0), Some(FailureKind::Collision));
    }

    #[test]
    fn lateral_drift_of_constant_arc() {
        let lane = Lane { segments: vec![Segment { length: 10.0, curvature: 0.0 }, Segment { length: 50.0, curvature: 0.02 }] };
        // 5 m straight then 5 m of arc: 0.02 * 5² / 2
        assert!((lane.lateral_drift(5.0, 10.0) - 0.25).abs() < 1e-12);
        assert!((lane.lateral_drift(20.0, 10.0) - 1.0).abs() < 1e-12);
    }
}
