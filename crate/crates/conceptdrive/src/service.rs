// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP debugging service. Loaded artifacts are read-only for the life of
//! the session; rollouts and classification run as jobs on a bounded worker
//! pool and are polled by id. Every JSON response carries the config hash.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conceptdrive_core::concept::{match_cells, match_concept, ConceptBank, Similarity};
use conceptdrive_core::experiment::{
    classify, evaluate_subset, replay_trial, ClassifyConfig, ConceptSubset, Harness, ClassifyReport,
};
use conceptdrive_core::policy::{Maneuver, PolicyParams};
use conceptdrive_core::rng;
use conceptdrive_core::sim::{observe, render_concept_grid, Driver};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::commands::{all_coefficient_maps, classify_json, evaluation_json};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::Threshold;
use crate::scene::{scene_state, SceneId};

/// Upper bound on trials per request, to keep one job from starving the pool.
const MAX_TRIALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum JobStatus {
    Pending,
    Running,
    Done(Value),
    Failed(String),
}

impl JobStatus {
    fn name(&self) -> &'static str {
        match self {
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Done(_) => "done",
            JobStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone)]
struct Job {
    kind: &'static str,
    request: Value,
    status: JobStatus,
}

struct Classified {
    report: ClassifyReport,
    grid: (usize, usize),
    maps: Vec<f64>,
}

/// Everything a session serves.
pub struct Session {
    pub config_hash: String,
    pub seed: u64,
    pub default_trials: usize,
    pub workers: usize,
    harness: Harness,
    policy: PolicyParams,
    similarity: Similarity,
    classify_defaults: ClassifyConfig,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_id: Mutex<u64>,
    classified: Mutex<Option<Arc<Classified>>>,
    pool: Arc<Semaphore>,
    cors_origin: String,
}

impl Session {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let harness = cfg.harness()?;
        let policy = cfg.policy(&harness)?;
        Ok(Self {
            config_hash: cfg.hash(),
            seed: cfg.seed()?,
            default_trials: cfg.eval.trials,
            workers: cfg.service.workers,
            similarity: cfg.similarity()?,
            classify_defaults: cfg.classify_config()?,
            harness,
            policy,
            jobs: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(1),
            classified: Mutex::new(None),
            pool: Arc::new(Semaphore::new(cfg.service.workers)),
            cors_origin: cfg.service.cors_origin.clone(),
        })
    }

    fn new_job(&self, kind: &'static str, request: Value) -> u64 {
        let mut next = self.next_id.lock().expect("job counter");
        let id = *next;
        *next += 1;
        self.jobs.lock().expect("job table").insert(id, Job { kind, request, status: JobStatus::Pending });
        id
    }

    fn set_status(&self, id: u64, status: JobStatus) {
        if let Some(job) = self.jobs.lock().expect("job table").get_mut(&id) {
            // finished jobs never change again
            if !matches!(job.status, JobStatus::Done(_) | JobStatus::Failed(_)) {
                job.status = status;
            }
        }
    }
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unknown_concepts(names: Vec<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": format!("unknown concepts: {}", names.join(", ")), "unknown": names }),
        }
    }
}

type Shared = Arc<Session>;

fn reply(s: &Session, status: StatusCode, mut body: Value) -> Response {
    if let Value::Object(m) = &mut body {
        m.insert("config_hash".into(), s.config_hash.clone().into());
    }
    (status, Json(body)).into_response()
}

fn fail(s: &Session, e: ApiError) -> Response {
    reply(s, e.status, e.body)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> std::result::Result<T, ApiError> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn unknown_in(bank: &ConceptBank, names: &[String]) -> std::result::Result<(), ApiError> {
    let unknown: Vec<String> = names.iter().filter(|n| bank.get(n).is_none()).cloned().collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(ApiError::unknown_concepts(unknown))
    }
}

fn positive_trials(trials: Option<usize>, default: usize) -> std::result::Result<usize, ApiError> {
    let t = trials.unwrap_or(default);
    if t == 0 || t > MAX_TRIALS {
        return Err(ApiError::bad_request(format!("trials must be between 1 and {MAX_TRIALS}, got {t}")));
    }
    Ok(t)
}

/// Runs `work` on the worker pool and records its outcome.
fn launch<F>(s: &Shared, id: u64, work: F)
where
    F: FnOnce(&Session) -> Result<Value> + Send + 'static,
{
    let s = s.clone();
    tokio::spawn(async move {
        let _permit = s.pool.clone().acquire_owned().await.expect("worker pool open");
        s.set_status(id, JobStatus::Running);
        let session = s.clone();
        let outcome = tokio::task::spawn_blocking(move || work(&session)).await;
        let status = match outcome {
            Ok(Ok(v)) => JobStatus::Done(v),
            Ok(Err(e)) => JobStatus::Failed(e.to_string()),
            Err(e) => JobStatus::Failed(format!("worker panicked: {e}")),
        };
        s.set_status(id, status);
    });
}

async fn state(State(s): State<Shared>) -> Response {
    let (mut pending, mut running, mut done, mut failed) = (0, 0, 0, 0);
    for job in s.jobs.lock().expect("job table").values() {
        match job.status {
            JobStatus::Pending => pending += 1,
            JobStatus::Running => running += 1,
            JobStatus::Done(_) => done += 1,
            JobStatus::Failed(_) => failed += 1,
        }
    }
    let h = &s.harness;
    let p = &s.policy.config;
    let body = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": s.seed,
        "workers": s.workers,
        "default_trials": s.default_trials,
        "similarity": s.similarity.name(),
        "policy": { "hidden_dim": p.hidden, "grid": [p.grid.0, p.grid.1], "feature_dim": p.feature_dim },
        "bank": { "dim": h.bank.dim(), "concepts": h.bank.entries().len() },
        "pipeline": { "feature_sigma": h.feature_sigma },
        "sim": { "dt": h.sim.dt, "horizon": h.sim.horizon, "speed": h.sim.speed },
        "family": {
            "palette": crate::formats::PaletteFile::from(&h.family.palette),
            "obstacle_concepts": h.family.obstacle_concepts,
            "offroad_concepts": h.family.offroad_concepts,
        },
        "classes": Maneuver::ALL.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "classifier_ready": s.classified.lock().expect("classifier slot").is_some(),
        "jobs": { "pending": pending, "running": running, "done": done, "failed": failed },
    });
    reply(&s, StatusCode::OK, body)
}

async fn concepts(State(s): State<Shared>) -> Response {
    let bank = &s.harness.bank;
    let list: Vec<Value> = bank
        .entries()
        .iter()
        .map(|c| {
            let mut roles = Vec::new();
            if bank.sources().contains(&c.name) {
                roles.push("src");
            }
            if bank.targets().contains(&c.name) {
                roles.push("tgt");
            }
            json!({ "name": c.name, "roles": roles })
        })
        .collect();
    reply(&s, StatusCode::OK, json!({ "concepts": list, "scene_concepts": s.harness.family.concepts() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutRequest {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    subset: Vec<String>,
    #[serde(default = "infinite")]
    threshold: Threshold,
    #[serde(default)]
    trials: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    /// Trial whose per-step matches are reported.
    #[serde(default)]
    match_trial: usize,
}

fn infinite() -> Threshold {
    Threshold(f64::INFINITY)
}

/// The soft success, breakdown and per-step matches of one rollout request.
fn rollout_result(s: &Session, subset: &ConceptSubset, trials: usize, seed: u64, match_trial: usize) -> Result<Value> {
    let h = &s.harness;
    let eval = evaluate_subset(h, &s.policy, subset, s.similarity, trials, seed)?;
    let substitution = subset.substitution(&h.bank, s.similarity)?;
    let sub_ref = substitution.as_ref().map(|(b, r)| (b, r));
    let rec = replay_trial(h, &s.policy, sub_ref, seed, match_trial)?;
    let candidates = substitution.as_ref().map_or(&h.bank, |(b, _)| b);
    let cols = h.sim.view.cols;
    let steps: Vec<Value> = rec
        .steps
        .iter()
        .map(|st| {
            let map = st.features.as_ref().expect("replayed trials record features");
            let cells: Vec<Value> = match_cells(map, candidates, s.similarity)?
                .into_iter()
                .map(|m| json!({ "row": m.cell / cols, "col": m.cell % cols, "name": m.name, "score": m.score }))
                .collect();
            Ok(json!({ "step": st.step, "label": st.label.name(), "swaps": st.swaps, "cells": cells }))
        })
        .collect::<Result<_>>()?;
    let mut out = evaluation_json(&eval);
    out["per_step_matches"] = json!({
        "trial": match_trial,
        "soft_success": rec.soft_success,
        "steps": steps,
    });
    Ok(out)
}

async fn post_rollout(State(s): State<Shared>, body: Bytes) -> Response {
    let req: RolloutRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return fail(&s, e),
    };
    if let Err(e) = unknown_in(&s.harness.bank, &req.subset) {
        return fail(&s, e);
    }
    let trials = match positive_trials(req.trials, s.default_trials) {
        Ok(t) => t,
        Err(e) => return fail(&s, e),
    };
    if req.match_trial >= trials {
        return fail(&s, ApiError::bad_request(format!("match_trial {} outside 0..{trials}", req.match_trial)));
    }
    let seed = req.seed.unwrap_or(s.seed);
    let subset = ConceptSubset {
        name: req.name.clone().unwrap_or_else(|| "request".into()),
        concepts: req.subset.clone(),
        threshold: req.threshold.0,
    };
    let echo = json!({
        "name": subset.name, "subset": subset.concepts, "threshold": Threshold(subset.threshold),
        "trials": trials, "seed": seed, "match_trial": req.match_trial,
    });
    let id = s.new_job("rollout", echo);
    let match_trial = req.match_trial;
    launch(&s, id, move |session| rollout_result(session, &subset, trials, seed, match_trial));
    reply(&s, StatusCode::ACCEPTED, json!({ "job_id": id, "status": "pending" }))
}

async fn get_job(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    let job = id.parse::<u64>().ok().and_then(|n| s.jobs.lock().expect("job table").get(&n).cloned());
    let Some(job) = job else {
        return fail(&s, ApiError::new(StatusCode::NOT_FOUND, format!("unknown job '{id}'")));
    };
    let mut body = json!({ "job_id": id, "kind": job.kind, "request": job.request, "status": job.status.name() });
    match job.status {
        JobStatus::Done(v) => body["result"] = v,
        JobStatus::Failed(e) => body["error"] = e.into(),
        _ => {}
    }
    reply(&s, StatusCode::OK, body)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SceneRef {
    Index(u64),
    Id(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreviewRule {
    #[serde(default)]
    subset: Vec<String>,
    #[serde(default = "neg_infinite")]
    threshold: Threshold,
    #[serde(default)]
    similarity: Option<String>,
}

fn neg_infinite() -> Threshold {
    Threshold(f64::NEG_INFINITY)
}

impl Default for PreviewRule {
    fn default() -> Self {
        Self { subset: Vec::new(), threshold: neg_infinite(), similarity: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreviewRequest {
    scene: SceneRef,
    #[serde(default)]
    step: Option<usize>,
    #[serde(default)]
    rule: PreviewRule,
}

fn preview(s: &Session, req: PreviewRequest) -> std::result::Result<Value, ApiError> {
    let h = &s.harness;
    let mut id = match req.scene {
        SceneRef::Index(index) => SceneId { index, step: 0 },
        SceneRef::Id(text) => SceneId::parse(&text).map_err(|e| ApiError::bad_request(e.to_string()))?,
    };
    if let Some(step) = req.step {
        id.step = step;
    }
    unknown_in(&h.bank, &req.rule.subset)?;
    let similarity = match &req.rule.similarity {
        Some(name) => Similarity::parse(name).map_err(|e| ApiError::bad_request(e.to_string()))?,
        None => s.similarity,
    };
    let internal = |e: Error| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    let (scenario, state) = scene_state(h, s.seed, id).map_err(internal)?;
    let pipeline = h.pipeline(rng::derive(s.seed, 0x0B5));
    let (map, _) = observe(&state, &scenario, &h.sim, &pipeline, id.step).map_err(|e| internal(e.into()))?;
    let grid = render_concept_grid(&state, &scenario, &h.sim.view).map_err(|e| internal(e.into()))?;
    let truth = grid.names(&scenario);
    let restricted;
    let candidates = if req.rule.subset.is_empty() {
        &h.bank
    } else {
        restricted = h.bank.with_roles::<String>(&req.rule.subset, &[]).map_err(|e| internal(e.into()))?;
        &restricted
    };
    let threshold = req.rule.threshold.0;
    let cells: Vec<Value> = (0..map.cells())
        .map(|j| {
            let m = match_concept(map.cell(j), candidates, similarity)?;
            Ok(json!({
                "row": j / grid.cols, "col": j % grid.cols, "scene": truth[j],
                "matched": m.name, "score": m.score,
                "replaced": !req.rule.subset.is_empty() && m.score >= threshold,
            }))
        })
        .collect::<conceptdrive_core::Result<_>>()
        .map_err(|e| internal(e.into()))?;
    Ok(json!({
        "scene": { "index": id.index, "step": id.step },
        "rows": grid.rows,
        "cols": grid.cols,
        "similarity": similarity.name(),
        "threshold": Threshold(threshold),
        "cells": cells,
    }))
}

async fn substitute_preview(State(s): State<Shared>, body: Bytes) -> Response {
    let req: PreviewRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return fail(&s, e),
    };
    let session = s.clone();
    match tokio::task::spawn_blocking(move || preview(&session, req)).await {
        Ok(Ok(v)) => reply(&s, StatusCode::OK, v),
        Ok(Err(e)) => fail(&s, e),
        Err(e) => fail(&s, ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn coeffmap(State(s): State<Shared>, Path((class, cluster)): Path<(String, String)>) -> Response {
    let Some(c) = s.classified.lock().expect("classifier slot").clone() else {
        return fail(&s, ApiError::new(StatusCode::NOT_FOUND, "no classifier yet; POST /api/classify and wait for the job"));
    };
    let class_index = Maneuver::parse(&class)
        .map(Maneuver::index)
        .ok()
        .or_else(|| class.parse::<usize>().ok().filter(|&i| i < Maneuver::ALL.len()));
    let Some(ci) = class_index else {
        return fail(&s, ApiError::new(StatusCode::NOT_FOUND, format!("unknown class '{class}'")));
    };
    let k = c.report.model.k();
    let Some(q) = cluster.parse::<usize>().ok().filter(|&q| q < k) else {
        return fail(&s, ApiError::new(StatusCode::NOT_FOUND, format!("unknown cluster '{cluster}' (k = {k})")));
    };
    let (rows, cols) = c.grid;
    let start = (ci * k + q) * rows * cols;
    let values: Vec<Vec<f64>> = c.maps[start..start + rows * cols].chunks(cols).map(<[f64]>::to_vec).collect();
    let body = json!({
        "class": Maneuver::ALL[ci].name(),
        "cluster": q,
        "anchor": c.report.anchors[q],
        "rows": rows,
        "cols": cols,
        "values": values,
    });
    reply(&s, StatusCode::OK, body)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyRequest {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    train_rollouts: Option<usize>,
    #[serde(default)]
    test_rollouts: Option<usize>,
    /// "policy" (default) or "teacher".
    #[serde(default)]
    driver: Option<String>,
}

async fn post_classify(State(s): State<Shared>, body: Bytes) -> Response {
    let req: ClassifyRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return fail(&s, e),
    };
    let mut cfg = s.classify_defaults.clone();
    if let Some(seed) = req.seed {
        cfg.seed = seed;
        cfg.svc.seed = seed;
    }
    cfg.k = req.k.unwrap_or(cfg.k);
    cfg.train_rollouts = req.train_rollouts.unwrap_or(cfg.train_rollouts);
    cfg.test_rollouts = req.test_rollouts.unwrap_or(cfg.test_rollouts);
    if cfg.k == 0 || cfg.train_rollouts == 0 || cfg.test_rollouts == 0 {
        return fail(&s, ApiError::bad_request("k, train_rollouts and test_rollouts must be positive"));
    }
    let teacher = match req.driver.as_deref() {
        None | Some("policy") => false,
        Some("teacher") => true,
        Some(other) => return fail(&s, ApiError::bad_request(format!("unknown driver '{other}'"))),
    };
    let echo = json!({
        "seed": cfg.seed, "k": cfg.k, "train_rollouts": cfg.train_rollouts,
        "test_rollouts": cfg.test_rollouts, "driver": if teacher { "teacher" } else { "policy" },
    });
    let id = s.new_job("classify", echo);
    launch(&s, id, move |session| {
        let driver = if teacher { Driver::Teacher } else { Driver::Policy(&session.policy) };
        let report = classify(&session.harness, driver, &cfg)?;
        let grid = (session.harness.sim.view.rows, session.harness.sim.view.cols);
        let maps = all_coefficient_maps(&report, grid)?;
        let out = classify_json(&report);
        *session.classified.lock().expect("classifier slot") = Some(Arc::new(Classified { report, grid, maps }));
        Ok(out)
    });
    reply(&s, StatusCode::ACCEPTED, json!({ "job_id": id, "status": "pending" }))
}

async fn schema(State(s): State<Shared>) -> Response {
    reply(&s, StatusCode::OK, schema_document())
}

async fn not_found(State(s): State<Shared>) -> Response {
    fail(&s, ApiError::new(StatusCode::NOT_FOUND, "no such endpoint"))
}

/// OpenAPI description of the endpoints.
pub fn schema_document() -> Value {
    let threshold = json!({
        "oneOf": [{ "type": "number" }, { "type": "string", "enum": ["inf", "-inf"] }],
        "description": "similarity a match needs; \"inf\" replaces nothing, \"-inf\" replaces every cell",
    });
    let job_accepted = json!({
        "description": "job accepted",
        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/JobAccepted" } } },
    });
    let error = json!({
        "description": "invalid request",
        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } },
    });
    let ok = |schema: &str| json!({
        "description": "ok",
        "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } },
    });
    let body = |schema: &str| json!({
        "required": true,
        "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } },
    });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "conceptdrive debugging service", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/api/state": { "get": { "summary": "session summary", "responses": { "200": ok("State") } } },
            "/api/concepts": { "get": { "summary": "concept bank names and roles", "responses": { "200": ok("Concepts") } } },
            "/api/rollout": { "post": {
                "summary": "evaluate the policy with cells replaced by subset concepts",
                "requestBody": body("RolloutRequest"),
                "responses": { "202": job_accepted, "400": error },
            } },
            "/api/job/{id}": { "get": {
                "summary": "job status and result",
                "parameters": [{ "name": "id", "in": "path", "required": true, "schema": { "type": "integer" } }],
                "responses": { "200": ok("Job"), "404": error },
            } },
            "/api/substitute-preview": { "post": {
                "summary": "per-cell matches of one observation",
                "requestBody": body("PreviewRequest"),
                "responses": { "200": ok("Preview"), "400": error },
            } },
            "/api/coeffmap/{class}/{cluster}": { "get": {
                "summary": "classifier coefficients of one cluster on the patch grid",
                "parameters": [
                    { "name": "class", "in": "path", "required": true, "schema": { "type": "string", "enum": ["lane_stable", "avoidance", "recovery"] } },
                    { "name": "cluster", "in": "path", "required": true, "schema": { "type": "integer", "minimum": 0 } },
                ],
                "responses": { "200": ok("CoefficientMap"), "404": error },
            } },
            "/api/classify": { "post": {
                "summary": "cluster features and fit the maneuver classifier",
                "requestBody": { "required": false, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/ClassifyRequest" } } } },
                "responses": { "202": job_accepted, "400": error },
            } },
            "/api/schema": { "get": { "summary": "this document", "responses": { "200": { "description": "OpenAPI document" } } } },
        },
        "components": { "schemas": {
            "Error": { "type": "object", "required": ["error", "config_hash"], "properties": {
                "error": { "type": "string" },
                "unknown": { "type": "array", "items": { "type": "string" } },
                "config_hash": { "type": "string" },
            } },
            "JobAccepted": { "type": "object", "properties": {
                "job_id": { "type": "integer" }, "status": { "type": "string" }, "config_hash": { "type": "string" },
            } },
            "State": { "type": "object", "properties": {
                "config_hash": { "type": "string" }, "seed": { "type": "integer" }, "workers": { "type": "integer" },
                "default_trials": { "type": "integer" }, "classes": { "type": "array", "items": { "type": "string" } },
                "classifier_ready": { "type": "boolean" }, "jobs": { "type": "object" },
            } },
            "Concepts": { "type": "object", "properties": {
                "concepts": { "type": "array", "items": { "type": "object", "properties": {
                    "name": { "type": "string" },
                    "roles": { "type": "array", "items": { "type": "string", "enum": ["src", "tgt"] } },
                } } },
                "scene_concepts": { "type": "array", "items": { "type": "string" } },
                "config_hash": { "type": "string" },
            } },
            "RolloutRequest": { "type": "object", "additionalProperties": false, "properties": {
                "name": { "type": "string" },
                "subset": { "type": "array", "items": { "type": "string" }, "description": "empty means no replacement" },
                "threshold": threshold,
                "trials": { "type": "integer", "minimum": 1 },
                "seed": { "type": "integer", "minimum": 0 },
                "match_trial": { "type": "integer", "minimum": 0 },
            } },
            "Job": { "type": "object", "properties": {
                "job_id": { "type": "string" },
                "kind": { "type": "string", "enum": ["rollout", "classify"] },
                "status": { "type": "string", "enum": ["pending", "running", "done", "failed"] },
                "request": { "type": "object" },
                "result": { "type": "object", "description": "rollout: soft_success, breakdown {lane_stable, avoidance, recovery}, per_trial, failures, per_step_matches; classify: accuracies and anchors" },
                "error": { "type": "string" },
                "config_hash": { "type": "string" },
            } },
            "PreviewRequest": { "type": "object", "required": ["scene"], "additionalProperties": false, "properties": {
                "scene": { "oneOf": [{ "type": "integer" }, { "type": "string", "pattern": "^scene:[0-9]+(:[0-9]+)?$" }] },
                "step": { "type": "integer", "minimum": 0 },
                "rule": { "type": "object", "properties": {
                    "subset": { "type": "array", "items": { "type": "string" } },
                    "threshold": threshold,
                    "similarity": { "type": "string", "enum": ["cosine", "dot"] },
                } },
            } },
            "Preview": { "type": "object", "properties": {
                "rows": { "type": "integer" }, "cols": { "type": "integer" },
                "cells": { "type": "array", "items": { "type": "object", "properties": {
                    "row": { "type": "integer" }, "col": { "type": "integer" }, "scene": { "type": "string" },
                    "matched": { "type": "string" }, "score": { "type": "number" }, "replaced": { "type": "boolean" },
                } } },
                "config_hash": { "type": "string" },
            } },
            "CoefficientMap": { "type": "object", "properties": {
                "class": { "type": "string" }, "cluster": { "type": "integer" }, "anchor": { "type": "string" },
                "rows": { "type": "integer" }, "cols": { "type": "integer" },
                "values": { "type": "array", "items": { "type": "array", "items": { "type": "number" } } },
                "config_hash": { "type": "string" },
            } },
            "ClassifyRequest": { "type": "object", "additionalProperties": false, "properties": {
                "seed": { "type": "integer" }, "k": { "type": "integer", "minimum": 1 },
                "train_rollouts": { "type": "integer", "minimum": 1 }, "test_rollouts": { "type": "integer", "minimum": 1 },
                "driver": { "type": "string", "enum": ["policy", "teacher"] },
            } },
        } },
    })
}

pub fn router(session: Arc<Session>) -> Router {
    let origin = if session.cors_origin == "*" {
        AllowOrigin::from(Any)
    } else {
        match HeaderValue::from_str(&session.cors_origin) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::from(Any),
        }
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/state", get(state))
        .route("/api/concepts", get(concepts))
        .route("/api/rollout", post(post_rollout))
        .route("/api/job/{id}", get(get_job))
        .route("/api/substitute-preview", post(substitute_preview))
        .route("/api/coeffmap/{class}/{cluster}", get(coeffmap))
        .route("/api/classify", post(post_classify))
        .route("/api/schema", get(schema))
        .fallback(not_found)
        .layer(cors)
        .with_state(session)
}

pub async fn serve(cfg: &ExperimentConfig) -> Result<()> {
    let session = Arc::new(Session::from_config(cfg)?);
    let addr = format!("{}:{}", cfg.service.bind, cfg.service.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::io(&addr, e))?;
    let local = listener.local_addr().map_err(|e| Error::io(&addr, e))?;
    println!("serving on http://{local}/api (config {})", session.config_hash);
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(&addr, e))
}

pub fn serve_blocking(cfg: &ExperimentConfig) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(serve(cfg))
}
