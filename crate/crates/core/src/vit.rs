// SPDX-License-Identifier: MIT OR Apache-2.0

//! A minimal single-head transformer encoder over image patches.
//!
//! Blocks are pre-norm:
//!
//! ```text
//! h   = x + softmax(LN1(x)·W_q · (LN1(x)·W_k)ᵀ / √d_k) · LN1(x)·W_v
//! out = h + W_2 · gelu(W_1 · LN2(h) + b_1) + b_2
//! ```
//!
//! and the encoder output is a pooled (token mean by default) `D`-vector.
//! [`forward_to_layer`] and [`encoder_suffix`] split that computation at the
//! attention of layer `ℓ`, which is where masked extraction intervenes. The
//! residual `x + attention` is folded into the post-attention state handed
//! to the suffix.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::linalg::{gelu, layer_norm, softmax_in_place, to_f32_exact, Mat};
use crate::rng;

/// An `H × W × 3` image with channel-last layout and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Dimension, "empty image {height}x{width}");
        }
        if data.len() != height * width * 3 {
            bail!(Dimension, "image {height}x{width}x3 needs {} values, got {}", height * width * 3, data.len());
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            bail!(Validation, "pixel value {bad} outside [0, 1]");
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    /// Uniform random pixels from a seeded stream.
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut r = rng::stream(seed, &[0x1A6E]);
        let data = (0..height * width * 3).map(|_| r.random::<f32>()).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// The patch layout of an image: `rows × cols` windows of `patch_size`
/// pixels placed every `stride` pixels. Patch `i` sits at grid coordinates
/// `(x, y) = (i mod cols, i div cols)` (row-stacked ordering).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub stride: usize,
}

impl PatchGrid {
    /// Grid for an `height × width` image.
    pub fn for_image(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            bail!(Config, "patch size and stride must be positive (got {patch_size}, {stride})");
        }
        if stride > patch_size {
            bail!(Config, "stride {stride} exceeds patch size {patch_size}");
        }
        if patch_size > height || patch_size > width {
            bail!(Dimension, "patch size {patch_size} larger than image {height}x{width}");
        }
        Ok(Self {
            rows: (height - patch_size) / stride + 1,
            cols: (width - patch_size) / stride + 1,
            patch_size,
            stride,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x, y)` = (column, row) of patch `i`.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.cols, i / self.cols)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.cols + x
    }
}

/// Splits `image` into patch tokens. Token `i` is the row-major flattening
/// (`dy`, `dx`, channel) of its pixel block.
pub fn patchify(image: &Image, patch_size: usize, stride: usize) -> Result<(PatchGrid, Mat)> {
    let grid = PatchGrid::for_image(image.height, image.width, patch_size, stride)?;
    let width = patch_size * patch_size * 3;
    let mut tokens = Mat::zeros(grid.len(), width);
    for i in 0..grid.len() {
        let (gx, gy) = grid.coords(i);
        let (x0, y0) = (gx * stride, gy * stride);
        let row = tokens.row_mut(i);
        let mut k = 0;
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                for c in 0..3 {
                    row[k] = f64::from(image.pixel(y0 + dy, x0 + dx, c));
                    k += 1;
                }
            }
        }
    }
    Ok((grid, tokens))
}

/// A positional-encoding table laid out as `rows·cols × D`, row-stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct PosTable {
    pub rows: usize,
    pub cols: usize,
    pub table: Mat,
}

impl PosTable {
    pub fn new(rows: usize, cols: usize, table: Mat) -> Result<Self> {
        if table.rows() != rows * cols {
            bail!(Dimension, "positional table has {} rows for a {rows}x{cols} grid", table.rows());
        }
        Ok(Self { rows, cols, table })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.table.row(row * self.cols + col)
    }
}

/// Corner-aligned sample position of target index `i` on a base axis.
fn axis_position(i: usize, target: usize, base: usize) -> (usize, f64) {
    let u = if target == 1 {
        (base - 1) as f64 / 2.0
    } else {
        i as f64 * (base - 1) as f64 / (target - 1) as f64
    };
    let i0 = (libm::floor(u) as usize).min(base - 2);
    (i0, u - i0 as f64)
}

/// Bilinearly resamples `base` onto a `rows × cols` grid. Grid corners map
/// to grid corners; resampling onto the base grid itself is exact.
pub fn interp_pos_encoding(base: &PosTable, rows: usize, cols: usize) -> Result<PosTable> {
    if base.rows < 2 || base.cols < 2 {
        bail!(Config, "positional grid {}x{} is degenerate; need at least 2x2", base.rows, base.cols);
    }
    if rows == 0 || cols == 0 {
        bail!(Config, "empty target grid {rows}x{cols}");
    }
    let d = base.dim();
    let mut table = Mat::zeros(rows * cols, d);
    for r in 0..rows {
        let (r0, tr) = axis_position(r, rows, base.rows);
        for c in 0..cols {
            let (c0, tc) = axis_position(c, cols, base.cols);
            let (a, b) = (base.at(r0, c0), base.at(r0, c0 + 1));
            let (e, f) = (base.at(r0 + 1, c0), base.at(r0 + 1, c0 + 1));
            let out = table.row_mut(r * cols + c);
            for k in 0..d {
                let top = (1.0 - tc) * a[k] + tc * b[k];
                let bottom = (1.0 - tc) * e[k] + tc * f[k];
                out[k] = (1.0 - tr) * top + tr * bottom;
            }
        }
    }
    PosTable::new(rows, cols, table)
}

/// How token states become the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => bail!(Config, "unknown pooling '{other}'"),
        }
    }

    fn apply(self, x: &Mat) -> Vec<f64> {
        match self {
            Pooling::Mean => x.mean_rows(),
            Pooling::Max => (0..x.cols())
                .map(|c| (0..x.rows()).map(|r| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Model width `D`.
    pub dim: usize,
    /// Query/key width `D_k`.
    pub key_dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    /// Grid the positional table was defined on.
    pub base_grid: (usize, usize),
    pub pooling: Pooling,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            key_dim: 32,
            layers: 4,
            mlp_hidden: 64,
            patch_size: 4,
            base_grid: (4, 4),
            pooling: Pooling::Mean,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub mlp_w1: Mat,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Mat,
    pub mlp_b2: Vec<f64>,
}

/// Encoder parameters. Values are kept `f32`-representable so that a
/// 32-bit archive round trip is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub patch_embed: Mat,
    pub patch_bias: Vec<f64>,
    pub pos: PosTable,
    pub layers: Vec<LayerWeights>,
}

/// A named tensor, as stored in an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data }
    }
}

impl EncoderWeights {
    /// Seeded initialization: every matrix (and the positional table) is
    /// uniform in `[-1/√D, 1/√D]`; biases are zero; norms are identity.
    pub fn seeded(config: EncoderConfig, seed: u64) -> Result<Self> {
        check_config(&config)?;
        let bound = 1.0 / libm::sqrt(config.dim as f64);
        let mut next_stream = 0u64;
        let mut uniform = |rows: usize, cols: usize| {
            next_stream += 1;
            let mut r = rng::stream(seed, &[0xE7C0, next_stream]);
            Mat::from_fn(rows, cols, |_, _| to_f32_exact(rng::uniform(&mut r, -bound, bound)))
        };
        let (d, dk, hid) = (config.dim, config.key_dim, config.mlp_hidden);
        let patch_in = config.patch_size * config.patch_size * 3;
        let patch_embed = uniform(patch_in, d);
        let (br, bc) = config.base_grid;
        let pos = PosTable::new(br, bc, uniform(br * bc, d))?;
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                w_q: uniform(d, dk),
                w_k: uniform(d, dk),
                w_v: uniform(d, d),
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                mlp_w1: uniform(d, hid),
                mlp_b1: vec![0.0; hid],
                mlp_w2: uniform(hid, d),
                mlp_b2: vec![0.0; d],
            })
            .collect();
        let w = Self { config, patch_embed, patch_bias: vec![0.0; d], pos, layers };
        w.validate()?;
        Ok(w)
    }

    /// Checks shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        check_config(c)?;
        let (d, dk, hid) = (c.dim, c.key_dim, c.mlp_hidden);
        let mut checks: Vec<(String, (usize, usize), (usize, usize), bool)> = vec![
            ("patch_embed".into(), self.patch_embed.shape(), (c.patch_size * c.patch_size * 3, d), self.patch_embed.is_finite()),
            ("pos_embed".into(), self.pos.table.shape(), (c.base_grid.0 * c.base_grid.1, d), self.pos.table.is_finite()),
            ("patch_bias".into(), (self.patch_bias.len(), 1), (d, 1), all_finite(&self.patch_bias)),
        ];
        if (self.pos.rows, self.pos.cols) != c.base_grid {
            bail!(Dimension, "positional grid {}x{} differs from config {:?}", self.pos.rows, self.pos.cols, c.base_grid);
        }
        if self.layers.len() != c.layers {
            bail!(Dimension, "{} layers present, config says {}", self.layers.len(), c.layers);
        }
        for (i, l) in self.layers.iter().enumerate() {
            let vecs_ok = [&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta, &l.mlp_b2]
                .iter()
                .all(|v| v.len() == d && all_finite(v))
                && l.mlp_b1.len() == hid
                && all_finite(&l.mlp_b1);
            if !vecs_ok {
                bail!(Dimension, "layer {i}: norm/bias vectors have wrong length or non-finite values");
            }
            checks.push((format!("layers.{i}.attn.q"), l.w_q.shape(), (d, dk), l.w_q.is_finite()));
            checks.push((format!("layers.{i}.attn.k"), l.w_k.shape(), (d, dk), l.w_k.is_finite()));
            checks.push((format!("layers.{i}.attn.v"), l.w_v.shape(), (d, d), l.w_v.is_finite()));
            checks.push((format!("layers.{i}.mlp.w1"), l.mlp_w1.shape(), (d, hid), l.mlp_w1.is_finite()));
            checks.push((format!("layers.{i}.mlp.w2"), l.mlp_w2.shape(), (hid, d), l.mlp_w2.is_finite()));
        }
        for (name, got, want, finite) in checks {
            if got != want {
                bail!(Dimension, "{name}: shape {got:?}, expected {want:?}");
            }
            if !finite {
                bail!(Validation, "{name}: non-finite values");
            }
        }
        Ok(())
    }

    /// Flattens the weights into named tensors (archive order).
    pub fn to_named(&self) -> Vec<NamedTensor> {
        let c = &self.config;
        let mat = |name: String, m: &Mat| NamedTensor::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
        let v = |name: String, x: &Vec<f64>| NamedTensor::new(name, vec![x.len()], x.clone());
        let mut out = vec![
            mat("patch_embed.weight".into(), &self.patch_embed),
            v("patch_embed.bias".into(), &self.patch_bias),
            NamedTensor::new("pos_embed", vec![c.base_grid.0, c.base_grid.1, c.dim], self.pos.table.as_slice().to_vec()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(v(format!("layers.{i}.ln1.gamma"), &l.ln1_gamma));
            out.push(v(format!("layers.{i}.ln1.beta"), &l.ln1_beta));
            out.push(mat(format!("layers.{i}.attn.q"), &l.w_q));
            out.push(mat(format!("layers.{i}.attn.k"), &l.w_k));
            out.push(mat(format!("layers.{i}.attn.v"), &l.w_v));
            out.push(v(format!("layers.{i}.ln2.gamma"), &l.ln2_gamma));
            out.push(v(format!("layers.{i}.ln2.beta"), &l.ln2_beta));
            out.push(mat(format!("layers.{i}.mlp.w1"), &l.mlp_w1));
            out.push(v(format!("layers.{i}.mlp.b1"), &l.mlp_b1));
            out.push(mat(format!("layers.{i}.mlp.w2"), &l.mlp_w2));
            out.push(v(format!("layers.{i}.mlp.b2"), &l.mlp_b2));
        }
        out
    }

    /// Rebuilds weights from named tensors; the architecture is inferred from
    /// the tensor shapes.
    pub fn from_named(tensors: &[NamedTensor], pooling: Pooling) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            match tensors.iter().find(|t| t.name == name) {
                Some(t) => Ok(t),
                None => bail!(Validation, "missing tensor '{name}'"),
            }
        };
        let as_mat = |name: &str| -> Result<Mat> {
            let t = find(name)?;
            if t.shape.len() != 2 {
                bail!(Dimension, "{name}: expected 2-d tensor, got shape {:?}", t.shape);
            }
            Mat::from_vec(t.shape[0], t.shape[1], t.data.clone())
        };
        let as_vec = |name: &str| -> Result<Vec<f64>> {
            let t = find(name)?;
            if t.shape.len() != 1 {
                bail!(Dimension, "{name}: expected 1-d tensor, got shape {:?}", t.shape);
            }
            Ok(t.data.clone())
        };
        let patch_embed = as_mat("patch_embed.weight")?;
        let patch_in = patch_embed.rows();
        let patch_size = (1..=patch_in).find(|p| p * p * 3 == patch_in);
        let Some(patch_size) = patch_size else {
            bail!(Dimension, "patch_embed.weight: {patch_in} input rows is not 3·p²");
        };
        let pos_t = find("pos_embed")?;
        if pos_t.shape.len() != 3 {
            bail!(Dimension, "pos_embed: expected [rows, cols, D], got {:?}", pos_t.shape);
        }
        let (br, bc, d) = (pos_t.shape[0], pos_t.shape[1], pos_t.shape[2]);
        let pos = PosTable::new(br, bc, Mat::from_vec(br * bc, d, pos_t.data.clone())?)?;
        let n_layers = (0..).take_while(|i| tensors.iter().any(|t| t.name == format!("layers.{i}.attn.q"))).count();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(LayerWeights {
                w_q: as_mat(&format!("layers.{i}.attn.q"))?,
                w_k: as_mat(&format!("layers.{i}.attn.k"))?,
                w_v: as_mat(&format!("layers.{i}.attn.v"))?,
                ln1_gamma: as_vec(&format!("layers.{i}.ln1.gamma"))?,
                ln1_beta: as_vec(&format!("layers.{i}.ln1.beta"))?,
                ln2_gamma: as_vec(&format!("layers.{i}.ln2.gamma"))?,
                ln2_beta: as_vec(&format!("layers.{i}.ln2.beta"))?,
                mlp_w1: as_mat(&format!("layers.{i}.mlp.w1"))?,
                mlp_b1: as_vec(&format!("layers.{i}.mlp.b1"))?,
                mlp_w2: as_mat(&format!("layers.{i}.mlp.w2"))?,
                mlp_b2: as_vec(&format!("layers.{i}.mlp.b2"))?,
            });
        }
        let Some(first) = layers.first() else {
            bail!(Validation, "archive holds no encoder layers");
        };
        let config = EncoderConfig {
            dim: d,
            key_dim: first.w_q.cols(),
            layers: n_layers,
            mlp_hidden: first.mlp_w1.cols(),
            patch_size,
            base_grid: (br, bc),
            pooling,
            ln_eps: EncoderConfig::default().ln_eps,
        };
        let w = Self { config, patch_embed, patch_bias: as_vec("patch_embed.bias")?, pos, layers };
        w.validate()?;
        Ok(w)
    }

    /// Returns a copy with an all-zero positional table.
    pub fn without_positional_encoding(&self) -> Self {
        let mut w = self.clone();
        w.pos.table = Mat::zeros(w.pos.table.rows(), w.pos.table.cols());
        w
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_config(c: &EncoderConfig) -> Result<()> {
    if c.dim == 0 || c.key_dim == 0 || c.layers == 0 || c.mlp_hidden == 0 || c.patch_size == 0 {
        bail!(Config, "encoder sizes must be positive: {c:?}");
    }
    if c.key_dim > c.dim {
        bail!(Config, "key width {} exceeds model width {}", c.key_dim, c.dim);
    }
    if c.base_grid.0 < 2 || c.base_grid.1 < 2 {
        bail!(Config, "positional base grid {:?} must be at least 2x2", c.base_grid);
    }
    Ok(())
}

/// State at the attention of layer `layer` (1-based): the layer input `x`
/// and the query/key/value matrices computed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrefix {
    pub grid: PatchGrid,
    pub layer: usize,
    pub x: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

impl LayerPrefix {
    /// Unmasked scaled scores `Q·Kᵀ / √D_k`.
    pub fn scores(&self) -> Mat {
        scaled_scores(&self.q, &self.k).expect("prefix shapes are consistent")
    }

    /// Post-attention state `x + softmax(scores)·V` for the given scores.
    pub fn attend(&self, scores: Mat) -> Result<Mat> {
        attend(&self.x, &self.v, scores)
    }
}

fn scaled_scores(q: &Mat, k: &Mat) -> Result<Mat> {
    let scale = 1.0 / libm::sqrt(q.cols() as f64);
    Ok(q.matmul_t(k)?.map(|g| g * scale))
}

fn attend(x: &Mat, v: &Mat, mut scores: Mat) -> Result<Mat> {
    let n = x.rows();
    if scores.shape() != (n, n) {
        bail!(Dimension, "score matrix {:?} for {n} tokens", scores.shape());
    }
    for r in 0..n {
        softmax_in_place(scores.row_mut(r));
    }
    let mut h = scores.matmul(v)?;
    h.add_assign(x)?;
    Ok(h)
}

/// Patch tokens embedded and offset by the (possibly interpolated)
/// positional encoding: the input to layer 1.
pub fn embed_tokens(weights: &EncoderWeights, image: &Image, stride: usize) -> Result<(PatchGrid, Mat)> {
    let (grid, tokens) = patchify(image, weights.config.patch_size, stride)?;
    let mut x = tokens.matmul(&weights.patch_embed)?;
    x.add_row_bias(&weights.patch_bias)?;
    let pos = if (grid.rows, grid.cols) == (weights.pos.rows, weights.pos.cols) {
        weights.pos.clone()
    } else {
        interp_pos_encoding(&weights.pos, grid.rows, grid.cols)?
    };
    x.add_assign(&pos.table)?;
    Ok((grid, x))
}

fn qkv(l: &LayerWeights, x: &Mat, eps: f64) -> Result<(Mat, Mat, Mat)> {
    let n = layer_norm(x, &l.ln1_gamma, &l.ln1_beta, eps);
    Ok((n.matmul(&l.w_q)?, n.matmul(&l.w_k)?, n.matmul(&l.w_v)?))
}

/// Layer `h + MLP(LN2(h))`.
fn mlp_sublayer(l: &LayerWeights, h: &Mat, eps: f64) -> Result<Mat> {
    let n = layer_norm(h, &l.ln2_gamma, &l.ln2_beta, eps);
    let mut a = n.matmul(&l.mlp_w1)?;
    a.add_row_bias(&l.mlp_b1)?;
    let a = a.map(gelu);
    let mut out = a.matmul(&l.mlp_w2)?;
    out.add_row_bias(&l.mlp_b2)?;
    out.add_assign(h)?;
    Ok(out)
}

fn check_layer(weights: &EncoderWeights, layer: usize) -> Result<()> {
    if layer == 0 || layer > weights.config.layers {
        bail!(Index, "layer {layer} outside 1..={}", weights.config.layers);
    }
    Ok(())
}

/// Runs blocks `1..layer` and returns the layer-`layer` attention inputs.
pub fn forward_to_layer(weights: &EncoderWeights, image: &Image, stride: usize, layer: usize) -> Result<LayerPrefix> {
    check_layer(weights, layer)?;
    let (grid, mut x) = embed_tokens(weights, image, stride)?;
    let eps = weights.config.ln_eps;
    for l in &weights.layers[..layer - 1] {
        let (q, k, v) = qkv(l, &x, eps)?;
        let h = attend(&x, &v, scaled_scores(&q, &k)?)?;
        x = mlp_sublayer(l, &h, eps)?;
    }
    let (q, k, v) = qkv(&weights.layers[layer - 1], &x, eps)?;
    Ok(LayerPrefix { grid, layer, x, q, k, v })
}

/// A hook applied to the scaled score matrix of a later layer, given the
/// layer index; used for the "mask every layer from ℓ on" mode.
pub type ScoreHook<'a> = &'a dyn Fn(usize, &mut Mat);

/// Everything after the attention of `layer`: that layer's MLP sublayer,
/// blocks `layer+1..=L`, and pooling. `h` is the post-attention state
/// (residual included).
pub fn encoder_suffix(weights: &EncoderWeights, h: &Mat, layer: usize) -> Result<Vec<f64>> {
    encoder_suffix_with(weights, h, layer, None)
}

/// [`encoder_suffix`] with an optional hook on each later layer's scores.
pub fn encoder_suffix_with(
    weights: &EncoderWeights,
    h: &Mat,
    layer: usize,
    hook: Option<ScoreHook<'_>>,
) -> Result<Vec<f64>> {
    check_layer(weights, layer)?;
    if h.cols() != weights.config.dim || h.rows() == 0 {
        bail!(Dimension, "post-attention state {:?}, model width {}", h.shape(), weights.config.dim);
    }
    let eps = weights.config.ln_eps;
    let mut x = mlp_sublayer(&weights.layers[layer - 1], h, eps)?;
    for (offset, l) in weights.layers[layer..].iter().enumerate() {
        let (q, k, v) = qkv(l, &x, eps)?;
        let mut scores = scaled_scores(&q, &k)?;
        if let Some(hook) = hook {
            hook(layer + 1 + offset, &mut scores);
        }
        let h = attend(&x, &v, scores)?;
        x = mlp_sublayer(l, &h, eps)?;
    }
    Ok(weights.config.pooling.apply(&x))
}

/// The whole unmasked encoder: `Desc(image)`.
pub fn forward(weights: &EncoderWeights, image: &Image, stride: usize) -> Result<Vec<f64>> {
    let prefix = forward_to_layer(weights, image, stride, 1)?;
    let h = prefix.attend(prefix.scores())?;
    encoder_suffix(weights, &h, 1)
}
