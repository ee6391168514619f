// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch- and region-aligned feature extraction by attention masking.
//!
//! For an anchor patch `j`, every patch `i` gets a weight `m_i = f(dist(i, j))`
//! and the layer-`ℓ` scores become `Ĝ[a, b] = G[a, b] + (1 - m_b)·r` with
//! `r < 0`, so keys far from `j` are suppressed for every query. The rest of
//! the encoder then turns the masked post-attention state into the feature
//! of patch `j`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::feature::{FeatureMap, Provenance};
use crate::linalg::Mat;
use crate::vit::{encoder_suffix_with, forward_to_layer, EncoderWeights, Image, LayerPrefix, PatchGrid};

/// Mask profile `f` applied to patch distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// `1` within distance `alpha`, `0` beyond.
    Box { alpha: f64 },
    /// `2^-dist`.
    ExpDecay,
    /// `1/dist`, and `1` at the anchor.
    InvDist,
}

impl MaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::Box { .. } => "box",
            MaskKind::ExpDecay => "exp_decay",
            MaskKind::InvDist => "inv_dist",
        }
    }

    pub fn parse(name: &str, alpha: f64) -> Result<Self> {
        match name {
            "box" => Ok(MaskKind::Box { alpha }),
            "exp_decay" => Ok(MaskKind::ExpDecay),
            "inv_dist" => Ok(MaskKind::InvDist),
            other => bail!(Config, "unknown mask kind '{other}' (expected box, exp_decay or inv_dist)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskBuilderConfig {
    pub kind: MaskKind,
    /// Norm order of the patch distance, `z >= 1` (`f64::INFINITY` allowed).
    pub z: f64,
    /// Masking strength, strictly negative.
    pub r: f64,
}

impl Default for MaskBuilderConfig {
    fn default() -> Self {
        Self { kind: MaskKind::Box { alpha: 2.0 }, z: 2.0, r: -1e4 }
    }
}

impl MaskBuilderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z >= 1.0) {
            bail!(Config, "norm order z = {} must be >= 1", self.z);
        }
        check_strength(self.r)?;
        if let MaskKind::Box { alpha } = self.kind {
            if !(alpha >= 0.0) {
                bail!(Config, "box cutoff alpha = {alpha} must be >= 0");
            }
        }
        Ok(())
    }
}

fn check_strength(r: f64) -> Result<()> {
    if !(r < 0.0) || r.is_nan() {
        bail!(Config, "masking strength r = {r} must be negative");
    }
    Ok(())
}

/// Which patches feed the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAnchor {
    Patch(usize),
    Region,
}

/// Per-patch contribution weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub weights: Vec<f64>,
    pub anchor: MaskAnchor,
}

impl AttentionMask {
    /// A region mask; every entry must lie in `[0, 1]`.
    pub fn region(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0 && **w <= 1.0)) {
            bail!(Validation, "region weight {w} at patch {i} outside [0, 1]");
        }
        Ok(Self { weights, anchor: MaskAnchor::Region })
    }

    pub fn ones(n: usize) -> Self {
        Self { weights: alloc::vec![1.0; n], anchor: MaskAnchor::Region }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `‖(x_i, y_i) - (x_j, y_j)‖_z` in grid units.
pub fn patch_dist(i: usize, j: usize, grid: &PatchGrid, z: f64) -> Result<f64> {
    let n = grid.len();
    if i >= n || j >= n {
        bail!(Index, "patch pair ({i}, {j}) outside grid of {n}");
    }
    let (xi, yi) = grid.coords(i);
    let (xj, yj) = grid.coords(j);
    let dx = (xi as f64 - xj as f64).abs();
    let dy = (yi as f64 - yj as f64).abs();
    Ok(if z == 1.0 {
        dx + dy
    } else if z == 2.0 {
        libm::sqrt(dx * dx + dy * dy)
    } else if z.is_infinite() {
        dx.max(dy)
    } else {
        libm::pow(libm::pow(dx, z) + libm::pow(dy, z), 1.0 / z)
    })
}

/// Builds `m^(j)` with `m_i = f(dist(i, j))`; always `m_j = 1`.
pub fn build_mask(j: usize, grid: &PatchGrid, cfg: &MaskBuilderConfig) -> Result<AttentionMask> {
    cfg.validate()?;
    let n = grid.len();
    if j >= n {
        bail!(Index, "anchor patch {j} outside grid of {n}");
    }
    let weights = (0..n)
        .map(|i| {
            let d = patch_dist(i, j, grid, cfg.z)?;
            Ok(match cfg.kind {
                MaskKind::Box { alpha } => {
                    if d > alpha {
                        0.0
                    } else {
                        1.0
                    }
                }
                MaskKind::ExpDecay => libm::pow(2.0, -d),
                MaskKind::InvDist => {
                    if i == j {
                        1.0
                    } else {
                        1.0 / d
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionMask { weights, anchor: MaskAnchor::Patch(j) })
}

/// In-place `g[a, b] += (1 - m_b)·r`.
fn apply_mask(g: &mut Mat, m: &[f64], r: f64) {
    for a in 0..g.rows() {
        for (x, mb) in g.row_mut(a).iter_mut().zip(m) {
            *x += (1.0 - mb) * r;
        }
    }
}

/// `Ĝ = G + (1 - M)·r`, where every row of `M` is `m`.
pub fn masked_scores(g: &Mat, m: &AttentionMask, r: f64) -> Result<Mat> {
    check_strength(r)?;
    if g.rows() != g.cols() || g.cols() != m.len() {
        bail!(Dimension, "score matrix {:?} against mask of length {}", g.shape(), m.len());
    }
    let mut out = g.clone();
    apply_mask(&mut out, &m.weights, r);
    Ok(out)
}

/// Which layers see the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskScope {
    /// Only layer `ℓ`; later layers run unmasked.
    #[default]
    LayerOnly,
    /// Layer `ℓ` and every later layer.
    FromLayer,
}

/// Settings shared by every extraction entry point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    /// 1-based attention layer at which the mask is applied.
    pub layer: usize,
    pub mask: MaskBuilderConfig,
    pub scope: MaskScope,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { layer: 2, mask: MaskBuilderConfig::default(), scope: MaskScope::LayerOnly }
    }
}

/// Masked attention at the prefix layer followed by the encoder suffix.
pub fn extract_from_prefix(
    weights: &EncoderWeights,
    prefix: &LayerPrefix,
    scores: &Mat,
    mask: &AttentionMask,
    r: f64,
    scope: MaskScope,
) -> Result<Vec<f64>> {
    let masked = masked_scores(scores, mask, r)?;
    let h = prefix.attend(masked)?;
    match scope {
        MaskScope::LayerOnly => encoder_suffix_with(weights, &h, prefix.layer, None),
        MaskScope::FromLayer => {
            let hook = |_layer: usize, g: &mut Mat| apply_mask(g, &mask.weights, r);
            encoder_suffix_with(weights, &h, prefix.layer, Some(&hook))
        }
    }
}

/// `F'(j)`: the feature of patch `j` at grid stride `stride`.
pub fn extract_patch_feature(
    weights: &EncoderWeights,
    image: &Image,
    stride: usize,
    j: usize,
    cfg: &ExtractConfig,
) -> Result<Vec<f64>> {
    cfg.mask.validate()?;
    let prefix = forward_to_layer(weights, image, stride, cfg.layer)?;
    let mask = build_mask(j, &prefix.grid, &cfg.mask)?;
    extract_from_prefix(weights, &prefix, &prefix.scores(), &mask, cfg.mask.r, cfg.scope)
}

/// The feature of an arbitrary soft region `region ∈ [0, 1]^N`.
pub fn extract_region_feature(
    weights: &EncoderWeights,
    image: &Image,
    stride: usize,
    region: &[f64],
    cfg: &ExtractConfig,
) -> Result<Vec<f64>> {
    let mask = AttentionMask::region(region.to_vec())?;
    check_strength(cfg.mask.r)?;
    let prefix = forward_to_layer(weights, image, stride, cfg.layer)?;
    if mask.len() != prefix.grid.len() {
        bail!(Dimension, "region of length {} for a grid of {}", mask.len(), prefix.grid.len());
    }
    extract_from_prefix(weights, &prefix, &prefix.scores(), &mask, cfg.mask.r, cfg.scope)
}

/// Strides (with the grids they produce) for an image under `patch_size`.
pub fn achievable_grids(height: usize, width: usize, patch_size: usize) -> Vec<(usize, PatchGrid)> {
    (1..=patch_size)
        .filter_map(|s| PatchGrid::for_image(height, width, patch_size, s).ok().map(|g| (s, g)))
        .collect()
}

/// Stride yielding a `rows × cols` grid.
pub fn stride_for_grid(height: usize, width: usize, patch_size: usize, rows: usize, cols: usize) -> Result<usize> {
    let options = achievable_grids(height, width, patch_size);
    if let Some((s, _)) = options.iter().find(|(_, g)| (g.rows, g.cols) == (rows, cols)) {
        return Ok(*s);
    }
    let listing: Vec<String> = options.iter().map(|(s, g)| format!("stride {s} -> {}x{}", g.rows, g.cols)).collect();
    bail!(Config, "no stride gives a {rows}x{cols} grid for a {height}x{width} image; valid: {}", listing.join(", "))
}

/// Dense `F'` on a `rows × cols` grid. Layer-`ℓ` queries, keys and values are
/// computed once per image; each cell only varies the mask.
pub fn extract_dense(
    weights: &EncoderWeights,
    image: &Image,
    cfg: &ExtractConfig,
    rows: usize,
    cols: usize,
) -> Result<FeatureMap> {
    cfg.mask.validate()?;
    let stride = stride_for_grid(image.height(), image.width(), weights.config.patch_size, rows, cols)?;
    let prefix = forward_to_layer(weights, image, stride, cfg.layer)?;
    let scores = prefix.scores();
    let dim = weights.config.dim;
    let mut data = Vec::with_capacity(prefix.grid.len() * dim);
    for j in 0..prefix.grid.len() {
        let mask = build_mask(j, &prefix.grid, &cfg.mask)?;
        let f = extract_from_prefix(weights, &prefix, &scores, &mask, cfg.mask.r, cfg.scope)?;
        data.extend(f.iter().map(|&v| v as f32));
    }
    let mut map = FeatureMap::new(rows, cols, dim, data)?;
    map.provenance = Some(Provenance { layer: cfg.layer, mask_kind: cfg.mask.kind.name().into(), r: cfg.mask.r });
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{forward, EncoderConfig};
    use alloc::vec;

    fn grid(rows: usize, cols: usize) -> PatchGrid {
        PatchGrid { rows, cols, patch_size: 4, stride: 4 }
    }

    #[test]
    fn distances() {
        let g = grid(5, 5);
        let (a, b) = (g.index(0, 0), g.index(3, 4));
        assert_eq!(patch_dist(a, b, &g, 2.0).unwrap(), 5.0);
        assert_eq!(patch_dist(a, b, &g, 1.0).unwrap(), 7.0);
        assert_eq!(patch_dist(b, b, &g, 2.0).unwrap(), 0.0);
        assert_eq!(patch_dist(b, a, &g, 3.0).unwrap(), patch_dist(a, b, &g, 3.0).unwrap());
        assert!(matches!(patch_dist(0, 25, &g, 2.0), Err(crate::Error::Index(_))));
    }

    #[test]
    fn box_beyond_diameter_is_all_ones() {
        let g = grid(4, 4);
        let cfg = MaskBuilderConfig { kind: MaskKind::Box { alpha: 10.0 }, ..Default::default() };
        assert!(build_mask(5, &g, &cfg).unwrap().weights.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn exp_decay_at_distance_three() {
        let g = grid(1, 5);
        let cfg = MaskBuilderConfig { kind: MaskKind::ExpDecay, ..Default::default() };
        let m = build_mask(0, &g, &cfg).unwrap();
        assert_eq!(m.weights[3], 0.125);
        assert_eq!(m.weights[0], 1.0);
    }

    #[test]
    fn inv_dist_against_coordinate_loop() {
        let g = grid(3, 3);
        let cfg = MaskBuilderConfig { kind: MaskKind::InvDist, ..Default::default() };
        let m = build_mask(4, &g, &cfg).unwrap();
        let mut expected = vec![];
        for y in 0..3i32 {
            for x in 0..3i32 {
                let (dx, dy) = ((x - 1) as f64, (y - 1) as f64);
                let d = libm::sqrt(dx * dx + dy * dy);
                expected.push(if d == 0.0 { 1.0 } else { 1.0 / d });
            }
        }
        assert_eq!(m.weights, expected);
    }

    #[test]
    fn masked_scores_arithmetic() {
        let g = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = AttentionMask::region(vec![1.0, 0.5]).unwrap();
        assert_eq!(masked_scores(&g, &m, -2.0).unwrap().into_vec(), vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(masked_scores(&g, &AttentionMask::ones(2), -7.0).unwrap(), g);
        assert!(matches!(masked_scores(&g, &m, 0.0), Err(crate::Error::Config(_))));
        assert!(matches!(masked_scores(&g, &m, 1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn region_rejects_out_of_range() {
        assert!(matches!(AttentionMask::region(vec![0.2, 1.1]), Err(crate::Error::Validation(_))));
        assert!(matches!(AttentionMask::region(vec![-0.1]), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn unknown_mask_kind() {
        assert!(matches!(MaskKind::parse("gauss", 1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn singleton_grid_matches_unmasked() {
        let cfg = EncoderConfig { dim: 8, key_dim: 8, layers: 2, mlp_hidden: 8, ..Default::default() };
        let w = EncoderWeights::seeded(cfg, 1).unwrap();
        let img = Image::random(4, 4, 2);
        let ec = ExtractConfig { layer: 1, ..Default::default() };
        assert_eq!(extract_patch_feature(&w, &img, 4, 0, &ec).unwrap(), forward(&w, &img, 4).unwrap());
    }

    #[test]
    fn unachievable_grid_lists_strides() {
        let err = stride_for_grid(8, 8, 4, 4, 4).unwrap_err();
        let crate::Error::Config(msg) = err else { panic!("wrong kind") };
        assert!(msg.contains("stride 2 -> 3x3"), "{msg}");
        assert_eq!(stride_for_grid(8, 8, 4, 3, 3).unwrap(), 2);
    }
}
