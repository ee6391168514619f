// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-loop reference implementations used as test oracles.

#![allow(dead_code)]

use conceptdrive_core::vit::{EncoderWeights, Image, Pooling};

/// Which keys a layer's attention may use.
#[derive(Clone, Debug)]
pub enum Keys {
    All,
    /// Attention renormalized over the retained keys only.
    Subset(Vec<bool>),
}

fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn matvec(x: &[f64], w: &conceptdrive_core::linalg::Mat) -> Vec<f64> {
    (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum()).collect()
}

/// Corner-aligned bilinear resampling of one channel of a base grid.
pub fn bilinear_channel(base: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let (br, bc) = (base.len(), base[0].len());
    let coord = |i: usize, n: usize, b: usize| -> f64 {
        if n == 1 {
            (b - 1) as f64 / 2.0
        } else {
            i as f64 * (b - 1) as f64 / (n - 1) as f64
        }
    };
    let mut out = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = (coord(r, rows, br), coord(c, cols, bc));
            let mut acc = 0.0;
            // weights of the four (or fewer) surrounding nodes
            for (ri, rw) in [(u.floor(), 1.0 - (u - u.floor())), (u.floor() + 1.0, u - u.floor())] {
                for (ci, cw) in [(v.floor(), 1.0 - (v - v.floor())), (v.floor() + 1.0, v - v.floor())] {
                    if rw * cw != 0.0 {
                        acc += rw * cw * base[ri as usize][ci as usize];
                    }
                }
            }
            out[r][c] = acc;
        }
    }
    out
}

/// The encoder computed token by token with explicit loops. `keys(l)` gives
/// the key restriction of 1-based layer `l`.
pub fn reference_forward(w: &EncoderWeights, img: &Image, stride: usize, keys: &dyn Fn(usize) -> Keys) -> Vec<f64> {
    let cfg = &w.config;
    let p = cfg.patch_size;
    let rows = (img.height() - p) / stride + 1;
    let cols = (img.width() - p) / stride + 1;
    let n = rows * cols;
    let d = cfg.dim;

    // positional table on the token grid, channel by channel
    let (br, bc) = (w.pos.rows, w.pos.cols);
    let mut pos = vec![vec![0.0; d]; n];
    for k in 0..d {
        let base: Vec<Vec<f64>> = (0..br).map(|r| (0..bc).map(|c| w.pos.at(r, c)[k]).collect()).collect();
        let grid = if (rows, cols) == (br, bc) { base } else { bilinear_channel(&base, rows, cols) };
        for r in 0..rows {
            for c in 0..cols {
                pos[r * cols + c][k] = grid[r][c];
            }
        }
    }

    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (gy, gx) = (i / cols, i % cols);
            let mut tok = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..3 {
                        tok.push(f64::from(img.pixel(gy * stride + dy, gx * stride + dx, ch)));
                    }
                }
            }
            let mut e = matvec(&tok, &w.patch_embed);
            for k in 0..d {
                e[k] += w.patch_bias[k] + pos[i][k];
            }
            e
        })
        .collect();

    for (li, l) in w.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &l.ln1_gamma, &l.ln1_beta, cfg.ln_eps)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| matvec(r, &l.w_q)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| matvec(r, &l.w_k)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| matvec(r, &l.w_v)).collect();
        let retained: Vec<bool> = match keys(li + 1) {
            Keys::All => vec![true; n],
            Keys::Subset(m) => m,
        };
        let scale = (cfg.key_dim as f64).sqrt();
        let mut h = x.clone();
        for a in 0..n {
            let scores: Vec<(usize, f64)> = (0..n)
                .filter(|&b| retained[b])
                .map(|b| (b, q[a].iter().zip(&k[b]).map(|(s, t)| s * t).sum::<f64>() / scale))
                .collect();
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for &(b, s) in &scores {
                let att = (s - max).exp() / z;
                for c in 0..d {
                    h[a][c] += att * v[b][c];
                }
            }
        }
        x = h
            .iter()
            .map(|hr| {
                let nr = layer_norm(hr, &l.ln2_gamma, &l.ln2_beta, cfg.ln_eps);
                let mut a = matvec(&nr, &l.mlp_w1);
                for (j, aj) in a.iter_mut().enumerate() {
                    *aj = gelu(*aj + l.mlp_b1[j]);
                }
                let o = matvec(&a, &l.mlp_w2);
                (0..d).map(|c| hr[c] + o[c] + l.mlp_b2[c]).collect()
            })
            .collect();
    }
    match cfg.pooling {
        Pooling::Mean => (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect(),
        Pooling::Max => (0..d).map(|c| x.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max)).collect(),
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Relative error of the whole vector: `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}
