// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inspection tools for a trained policy's inputs: k-means over cell
//! features, distance-to-center projection, one-vs-rest linear SVMs on the
//! projected grid, coefficient maps, and naming clusters after concepts.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::concept::{match_any, ConceptBank, Similarity};
use crate::error::{bail, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub dim: usize,
    /// `k` centers, row-major `k × dim`.
    pub centers: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    /// Index of the nearest center (first on ties).
    pub fn assign(&self, f: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k() {
            let d = sq_dist(f, self.center(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding over `points` (row-major,
/// `n × dim`). Stops when assignments no longer change or after `max_iter`
/// iterations. An empty cluster keeps its previous center.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    if dim == 0 || points.len() % dim != 0 {
        bail!(Dimension, "{} values do not form points of dimension {dim}", points.len());
    }
    if k < 2 {
        bail!(Config, "k must be at least 2 (got {k})");
    }
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let distinct: BTreeSet<Vec<u64>> = (0..n).map(|i| point(i).iter().map(|x| x.to_bits()).collect()).collect();
    if distinct.len() < k {
        bail!(Config, "k-means needs at least {k} distinct points (got {})", distinct.len());
    }
    if points.iter().any(|x| !x.is_finite()) {
        bail!(Validation, "k-means input contains non-finite values");
    }

    let mut r = rng::stream(seed, &[0xC1]);
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(point(r.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let mut target = r.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in nearest.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        let pick = pick.expect("fewer distinct points than k");
        centers.extend_from_slice(point(pick));
        let c = centers.len() / dim - 1;
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(point(i), &centers[c * dim..(c + 1) * dim]));
        }
    }

    let mut model = ClusterModel { dim, centers, inertia: 0.0, inertia_history: Vec::new(), iterations: 0 };
    let mut assignment = vec![usize::MAX; n];
    for it in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let c = model.assign(point(i));
            inertia += sq_dist(point(i), model.center(c));
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        model.inertia = inertia;
        model.inertia_history.push(inertia);
        model.iterations = it + 1;
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    model.centers[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
    }
    Ok(model)
}

/// Euclidean distances from `f` to every center.
pub fn project(f: &[f64], model: &ClusterModel) -> Result<Vec<f64>> {
    if f.len() != model.dim {
        bail!(Dimension, "feature of dimension {} against centers of dimension {}", f.len(), model.dim);
    }
    Ok((0..model.k()).map(|c| libm::sqrt(sq_dist(f, model.center(c)))).collect())
}

/// Concatenated projections of every cell of a flattened feature grid:
/// entry `i·k + q` is the distance from cell `i` to center `q`.
pub fn project_grid(cells: &[f32], model: &ClusterModel) -> Result<Vec<f64>> {
    if cells.len() % model.dim != 0 {
        bail!(Dimension, "{} values are not whole cells of dimension {}", cells.len(), model.dim);
    }
    let mut out = Vec::with_capacity(cells.len() / model.dim * model.k());
    let mut buf = vec![0.0; model.dim];
    for cell in cells.chunks(model.dim) {
        for (b, &x) in buf.iter_mut().zip(cell) {
            *b = f64::from(x);
        }
        out.extend(project(&buf, model)?);
    }
    Ok(out)
}

/// One-vs-rest linear classifier: `score_c(x) = w_c·x + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { classes, dim, weights: vec![0.0; classes * dim], bias: vec![0.0; classes] }
    }

    pub fn class_weights(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.class_weights(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[c])
            .collect()
    }

    /// Highest-scoring class (smallest index on ties).
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        hits as f64 / x.len().max(1) as f64
    }

    /// Per-class recall, `None` for classes absent from `y`.
    pub fn class_accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> Vec<Option<f64>> {
        let mut hit = vec![0usize; self.classes];
        let mut total = vec![0usize; self.classes];
        for (xi, &yi) in x.iter().zip(y) {
            total[yi] += 1;
            if self.predict(xi) == yi {
                hit[yi] += 1;
            }
        }
        hit.iter().zip(&total).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SvcMode {
    /// One random sample per update, step `1/(λ·t)`.
    Stochastic,
    /// Mean subgradient over all samples per update; `None` uses `1/(λ·t)`.
    FullBatch { step: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvcConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: SvcMode,
}

impl Default for SvcConfig {
    fn default() -> Self {
        Self { lambda: 1e-2, epochs: 50, seed: 0, mode: SvcMode::Stochastic }
    }
}

/// `λ/2·|w|² + mean hinge(1 − y·(w·x + b))` of one binary subproblem.
pub fn hinge_objective(w: &[f64], b: f64, x: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| (1.0 - yi * (w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>() + b)).max(0.0))
        .sum();
    reg + hinge / x.len() as f64
}

/// Trains a `classes`-way one-vs-rest hinge-loss classifier by subgradient
/// descent. The bias is not regularized.
pub fn train_linear_svc(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &SvcConfig) -> Result<LinearClassifier> {
    if x.is_empty() || x.len() != y.len() {
        bail!(Dimension, "{} samples with {} labels", x.len(), y.len());
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        bail!(Dimension, "samples have inconsistent dimensions");
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        bail!(Index, "label {bad} out of range for {classes} classes");
    }
    if y.iter().all(|&c| c == y[0]) {
        bail!(Config, "training labels contain a single class");
    }
    if !(cfg.lambda > 0.0) {
        bail!(Config, "regularization weight must be positive");
    }
    let mut clf = LinearClassifier::zeros(classes, dim);
    for c in 0..classes {
        let signs: Vec<f64> = y.iter().map(|&yi| if yi == c { 1.0 } else { -1.0 }).collect();
        let (w, b) = (&mut clf.weights[c * dim..(c + 1) * dim], &mut clf.bias[c]);
        match cfg.mode {
            SvcMode::Stochastic => {
                let mut order: Vec<usize> = (0..x.len()).collect();
                let mut t = 0usize;
                for epoch in 0..cfg.epochs {
                    order.shuffle(&mut rng::stream(cfg.seed, &[0x5FC, c as u64, epoch as u64]));
                    for &i in &order {
                        t += 1;
                        let eta = 1.0 / (cfg.lambda * t as f64);
                        let margin = signs[i] * (w.iter().zip(&x[i]).map(|(a, v)| a * v).sum::<f64>() + *b);
                        let shrink = 1.0 - eta * cfg.lambda;
                        w.iter_mut().for_each(|v| *v *= shrink);
                        if margin < 1.0 {
                            for (wv, xv) in w.iter_mut().zip(&x[i]) {
                                *wv += eta * signs[i] * xv;
                            }
                            *b += eta * signs[i];
                        }
                    }
                }
            }
            SvcMode::FullBatch { step } => {
                let n = x.len() as f64;
                let mut gw = vec![0.0; dim];
                for t in 1..=cfg.epochs {
                    let eta = step.unwrap_or(1.0 / (cfg.lambda * t as f64));
                    gw.iter_mut().zip(w.iter()).for_each(|(g, wv)| *g = cfg.lambda * wv);
                    let mut gb = 0.0;
                    for (xi, &si) in x.iter().zip(&signs) {
                        let margin = si * (w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>() + *b);
                        if margin < 1.0 {
                            for (g, xv) in gw.iter_mut().zip(xi) {
                                *g -= si * xv / n;
                            }
                            gb -= si / n;
                        }
                    }
                    for (wv, g) in w.iter_mut().zip(&gw) {
                        *wv -= eta * g;
                    }
                    *b -= eta * gb;
                }
            }
        }
        if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            bail!(Training, "classifier weights diverged for class {c}");
        }
    }
    Ok(clf)
}

/// Weights of `class` for projected dimension `cluster`, laid out on the
/// `rows × cols` patch grid (cell `i` reads weight `i·k + cluster`).
pub fn coefficient_map(
    clf: &LinearClassifier,
    grid: (usize, usize),
    k: usize,
    class: usize,
    cluster: usize,
) -> Result<Vec<f64>> {
    let cells = grid.0 * grid.1;
    if cells * k != clf.dim {
        bail!(Dimension, "classifier of dimension {} does not fit a {}x{} grid with k = {k}", clf.dim, grid.0, grid.1);
    }
    if class >= clf.classes {
        bail!(Index, "class {class} out of range ({} classes)", clf.classes);
    }
    if cluster >= k {
        bail!(Index, "cluster {cluster} out of range (k = {k})");
    }
    let w = clf.class_weights(class);
    Ok((0..cells).map(|i| w[i * k + cluster]).collect())
}

/// Names every center after its best match over the whole bank.
pub fn anchor_clusters(model: &ClusterModel, bank: &ConceptBank, kind: Similarity) -> Result<Vec<String>> {
    (0..model.k())
        .map(|c| {
            let f: Vec<f32> = model.center(c).iter().map(|&x| x as f32).collect();
            Ok(match_any(&f, bank, kind)?.name)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_on_exact_points() {
        let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let m = kmeans(&pts, 2, 3, 4, 100).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut centers: Vec<Vec<u64>> = m.centers.chunks(2).map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
        centers.sort();
        let mut want: Vec<Vec<u64>> = pts.chunks(2).map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
        want.sort();
        assert_eq!(centers, want);
    }

    #[test]
    fn kmeans_rejects_degenerate_input() {
        assert!(kmeans(&[1.0; 20], 2, 4, 0, 10).is_err());
        assert!(kmeans(&[0.0, 1.0], 1, 1, 0, 10).is_err());
    }

    #[test]
    fn projection_examples() {
        let m = ClusterModel { dim: 2, centers: vec![1.0, 0.0, -1.0, 0.0], inertia: 0.0, inertia_history: vec![], iterations: 0 };
        assert_eq!(project(&[0.0, 0.0], &m).unwrap(), vec![1.0, 1.0]);
        assert_eq!(project(&[1.0, 0.0], &m).unwrap()[0], 0.0);
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        let y = vec![0, 1, 2];
        let cfg = SvcConfig { lambda: 1e9, epochs: 20, seed: 1, mode: SvcMode::FullBatch { step: None } };
        let clf = train_linear_svc(&x, &y, 3, &cfg).unwrap();
        assert!(clf.weights.iter().all(|w| w.abs() < 1e-8));
        assert!(train_linear_svc(&x, &[1, 1, 1], 3, &cfg).is_err());
    }

    #[test]
    fn coefficient_map_round_trip() {
        let mut clf = LinearClassifier::zeros(3, 2 * 3 * 4);
        assert!(coefficient_map(&clf, (2, 3), 4, 1, 2).unwrap().iter().all(|&v| v == 0.0));
        for (i, w) in clf.weights.iter_mut().enumerate() {
            *w = i as f64 * 0.37 - 5.0;
        }
        let map = coefficient_map(&clf, (2, 3), 4, 1, 2).unwrap();
        let slice: Vec<f64> = (0..6).map(|i| clf.class_weights(1)[i * 4 + 2]).collect();
        assert_eq!(map, slice);
        assert!(coefficient_map(&clf, (2, 3), 4, 3, 0).is_err());
    }
}
