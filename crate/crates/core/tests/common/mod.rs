//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ast_core::config::{ModelConfig, Profile, RunConfig};

pub fn distinct(map: &[u8]) -> Vec<u8> {
    map.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// IoU of predicted label `p` against ground-truth label `g`, by counting.
pub fn iou(pred: &[u8], gt: &[u8], p: u8, g: u8) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == p, b == g);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// mIoU by trying every injective assignment of ground-truth segments to
/// predicted segments (or to nothing).
pub fn miou_exhaustive(pred: &[u8], gt: &[u8]) -> f64 {
    let pl = distinct(pred);
    let gl = distinct(gt);
    fn search(j: usize, gl: &[u8], pl: &[u8], used: &mut Vec<bool>, pred: &[u8], gt: &[u8]) -> f64 {
        if j == gl.len() {
            return 0.0;
        }
        let mut best = search(j + 1, gl, pl, used, pred, gt);
        for i in 0..pl.len() {
            if !used[i] {
                used[i] = true;
                let v = iou(pred, gt, pl[i], gl[j]) + search(j + 1, gl, pl, used, pred, gt);
                used[i] = false;
                best = best.max(v);
            }
        }
        best
    }
    let mut used = vec![false; pl.len()];
    search(0, &gl, &pl, &mut used, pred, gt) / gl.len() as f64
}

/// ARI over ground-truth foreground pixels from explicit pair counts.
pub fn ari_pair_counting(pred: &[u8], gt: &[u8]) -> f64 {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    let (mut both, mut same_pred, mut same_gt, mut pairs) = (0u64, 0u64, 0u64, 0u64);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            let sp = pred[i] == pred[j];
            let sg = gt[i] == gt[j];
            both += (sp && sg) as u64;
            same_pred += sp as u64;
            same_gt += sg as u64;
            pairs += 1;
        }
    }
    let (index, sa, sb) = (both as f64, same_pred as f64, same_gt as f64);
    let expected = sa * sb / (pairs as f64).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sa + sb);
    if max - expected == 0.0 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Segmentation covering over ground-truth foreground regions, directly.
pub fn msc_direct(pred: &[u8], gt: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for g in distinct(gt).into_iter().filter(|&g| g != 0) {
        let size = gt.iter().filter(|&&x| x == g).count() as f64;
        let best = distinct(pred)
            .into_iter()
            .map(|p| iou(pred, gt, p, g))
            .fold(0.0, f64::max);
        num += size * best;
        den += size;
    }
    num / den
}

/// MSE on the 0-255 scale with an explicit loop over rows and columns of
/// each channel.
pub fn mse_loops(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                let d = 255.0 * a[i] - 255.0 * b[i];
                s += d * d;
            }
        }
    }
    s / (channels * h * w) as f64
}

/// Direct 2-D cross-correlation, `x` `[B, C, H, W]`, `k` `[O, C, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_loops(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = xs;
    let [o, _, kh, kw] = ks;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((n * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, o, ho, wo])
}

/// Transposed convolution by scattering every input pixel, `k` `[C, O, kh, kw]`.
pub fn conv_transpose2d_loops(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = xs;
    let [_, o, kh, kw] = ks;
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; b * o * ho * wo];
    for n in 0..b {
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[((n * c + ic) * h + iy) * w + ix];
                    for oc in 0..o {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                out[((n * o + oc) * ho + oy as usize) * wo + ox as usize] +=
                                    v * k[((ic * o + oc) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [b, o, ho, wo])
}

/// Bilinear sampling with corner-aligned coordinates and zeros outside.
pub fn grid_sample_loops(src: &[f64], ss: [usize; 4], grid: &[f64], ho: usize, wo: usize) -> Vec<f64> {
    let [n, c, h, w] = ss;
    let at = |b: usize, ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[((b * c + ch) * h + y as usize) * w + x as usize]
        }
    };
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let gi = ((b * ho + oy) * wo + ox) * 2;
                let px = (grid[gi] + 1.0) / 2.0 * (w - 1) as f64;
                let py = (grid[gi + 1] + 1.0) / 2.0 * (h - 1) as f64;
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ch in 0..c {
                    let v = at(b, ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                        + at(b, ch, y0, x0 + 1) * fx * (1.0 - fy)
                        + at(b, ch, y0 + 1, x0) * (1.0 - fx) * fy
                        + at(b, ch, y0 + 1, x0 + 1) * fx * fy;
                    out[((b * c + ch) * ho + oy) * wo + ox] = v;
                }
            }
        }
    }
    out
}

/// Multi-head self-attention on one `[K, d]` set with row-major `[in, out]`
/// projection weights.
pub struct AttentionWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

fn affine(x: &[f64], k: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * d];
    for r in 0..k {
        for j in 0..d {
            let mut acc = b[j];
            for i in 0..d {
                acc += x[r * d + i] * w[i * d + j];
            }
            out[r * d + j] = acc;
        }
    }
    out
}

pub fn attention_loops(x: &[f64], k: usize, d: usize, heads: usize, p: &AttentionWeights) -> Vec<f64> {
    let q = affine(x, k, d, p.wq, p.bq);
    let kk = affine(x, k, d, p.wk, p.bk);
    let v = affine(x, k, d, p.wv, p.bv);
    let dh = d / heads;
    let mut ctx = vec![0.0; k * d];
    for h in 0..heads {
        for i in 0..k {
            let scores: Vec<f64> = (0..k)
                .map(|j| {
                    (0..dh).map(|t| q[i * d + h * dh + t] * kk[j * d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                ctx[i * d + h * dh + t] = (0..k).map(|j| e[j] / z * v[j * d + h * dh + t]).sum();
            }
        }
    }
    affine(&ctx, k, d, p.wo, p.bo)
}

/// A model small enough for fast tests.
pub fn tiny_model_config() -> ModelConfig {
    let mut m = RunConfig::profile(Profile::Desk).model;
    m.image_size = 16;
    m.slots = 2;
    m.feature_generator.widths = vec![4, 8, 8];
    m.encoder.d_t = 8;
    m.encoder.heads = 2;
    m.encoder.ff_dim = 8;
    m.encoder.layers = 1;
    m.encoder.z_what_dim = 4;
    m.background.latent_dim = 4;
    m.background.widths = vec![4, 4];
    m
}

/// A full run configuration around [`tiny_model_config`].
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.model = tiny_model_config();
    cfg.data.image_size = 16;
    cfg.data.count = 6;
    let t = &mut cfg.train;
    t.total_steps = 6;
    t.phase2_steps = 3;
    t.batch_size = 2;
    t.bg_pretrain_steps = 3;
    t.bg_batch_size = 2;
    t.log_every = 1;
    t.eval_every = 3;
    t.checkpoint_every = 3;
    t.n_pixel = 4;
    t.lr_warmup_steps = 2;
    cfg
}
