//! Glimpse generation, spatial-transformer placement, occlusion weights and
//! layer compositing.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::ModelConfig;
use crate::encoder::ObjectLatents;
use crate::error::{ensure, Result};
use crate::localization::CoordinateGrid;
use crate::nn::{ConvTranspose2d, Norm};
use crate::params::{Bound, Init};

#[derive(Clone, Debug)]
struct GlimpseLayer {
    conv: ConvTranspose2d,
    norm: Option<Norm>,
}

/// Transposed-convolution stack turning `z_what` into a `g x g` RGBA glimpse.
#[derive(Clone, Debug)]
pub struct GlimpseGenerator {
    z_what_dim: usize,
    size: usize,
    layers: Vec<GlimpseLayer>,
}

/// Channel widths of the glimpse stack: halving from `4 * 2^(n-1)` down to 4.
pub fn glimpse_channels(glimpse_size: usize) -> Vec<usize> {
    let n = glimpse_size.trailing_zeros() as usize;
    (0..n).map(|i| 4 << (n - 1 - i)).collect()
}

impl GlimpseGenerator {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let size = cfg.glimpse_size();
        let channels = glimpse_channels(size);
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = cfg.encoder.z_what_dim;
        for (i, &c) in channels.iter().enumerate() {
            let mut s = init.scope(&format!("layer{i}"));
            let (k, pad) = if i == 0 { (2, 0) } else { (4, 1) };
            let conv = ConvTranspose2d::new(&mut s, "tconv", cin, c, k, 2, pad)?;
            let last = i + 1 == channels.len();
            let norm = if last {
                None
            } else {
                Some(Norm::group(&mut s, "norm", c, (c / 16).max(1))?)
            };
            layers.push(GlimpseLayer { conv, norm });
            cin = c;
        }
        Ok(Self {
            z_what_dim: cfg.encoder.z_what_dim,
            size,
            layers,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `z_what` `[B, K, Z]` to glimpses `[B * K, 4, g, g]` in `[0, 1]`; channels
    /// 0..3 are the appearance `o` and channel 3 is the mask `m`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z_what: Var) -> Result<Var> {
        let s = g.shape(z_what).to_vec();
        ensure!(
            s.len() == 3 && s[2] == self.z_what_dim,
            "generate_glimpse",
            "expected [B, K, {}], got {s:?}",
            self.z_what_dim
        );
        let mut x = g.reshape(z_what, &[s[0] * s[1], self.z_what_dim, 1, 1])?;
        for layer in &self.layers {
            x = layer.conv.forward(g, p, x)?;
            if let Some(norm) = &layer.norm {
                x = norm.forward(g, p, x)?;
                x = g.celu(x);
            }
        }
        Ok(g.sigmoid(x))
    }
}

/// Canvas pixel coordinates as a `[h * w, 2]` constant.
fn canvas<T: Real>(g: &mut Graph<T>, h: usize, w: usize) -> Var {
    g.constant(CoordinateGrid::new(h, w).matrix())
}

/// Places glimpses on an `h x w` canvas by inverse warping: canvas point
/// `(a, b)` reads the glimpse at `((a - x) s_x, (b - y) s_y)`, zero outside.
///
/// `glimpse` is `[N, C, g, g]`, `position` `[N, 2]`, `scale` `[N, d_s]` with
/// `d_s` 1 or 2. Returns `[N, C, h, w]`.
pub fn place_layer<T: Real>(
    g: &mut Graph<T>,
    glimpse: Var,
    position: Var,
    scale: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let n = g.shape(glimpse)[0];
    let ds = g.shape(scale).to_vec();
    ensure!(
        g.shape(position) == [n, 2] && ds.len() == 2 && ds[0] == n && (ds[1] == 1 || ds[1] == 2),
        "place_layer",
        "position must be [{n}, 2] and scale [{n}, 1|2]"
    );
    let base = canvas(g, h, w);
    let base = g.reshape(base, &[1, h * w, 2])?;
    let pos = g.reshape(position, &[n, 1, 2])?;
    let sc = g.reshape(scale, &[n, 1, ds[1]])?;
    let rel = g.sub(base, pos)?;
    let grid = g.mul(rel, sc)?;
    let grid = g.reshape(grid, &[n, h, w, 2])?;
    g.grid_sample(glimpse, grid)
}

/// Occlusion weights `w_k = alpha_k M_k / sum_j alpha_j M_j` and the
/// composite `sum_k w_k L_k`.
///
/// `layers` `[B, K+1, 3, h, w]`, `masks` `[B, K+1, 1, h, w]`, `alpha`
/// `[B, K+1]`. Returns `(weights [B, K+1, 1, h, w], image [B, 3, h, w])`.
pub fn composite<T: Real>(g: &mut Graph<T>, layers: Var, masks: Var, alpha: Var) -> Result<(Var, Var)> {
    let ls = g.shape(layers).to_vec();
    let ms = g.shape(masks).to_vec();
    ensure!(
        ls.len() == 5 && ms.len() == 5 && ms[2] == 1 && ls[0] == ms[0] && ls[1] == ms[1] && ls[3..] == ms[3..],
        "composite",
        "layers {ls:?} and masks {ms:?} do not line up"
    );
    ensure!(
        g.shape(alpha) == [ls[0], ls[1]],
        "composite",
        "alpha must be [{}, {}]",
        ls[0],
        ls[1]
    );
    ensure!(
        g.value(alpha).data().iter().all(|&a| a > T::zero() && a.is_finite()),
        "composite",
        "activations must be positive and finite"
    );
    let a = g.reshape(alpha, &[ls[0], ls[1], 1, 1, 1])?;
    let num = g.mul(masks, a)?;
    let den = g.sum_axes(num, &[1], true)?;
    let weights = g.div(num, den)?;
    let weighted = g.mul(weights, layers)?;
    let image = g.sum_axes(weighted, &[1], false)?;
    Ok((weights, image))
}

/// Per-pixel index of the largest weight; ties go to the lowest index.
/// `weights` is `[B, K+1, 1, h, w]` (or `[B, K+1, h, w]`); returns `[B, h * w]`
/// labels in row-major order.
pub fn extract_segmentation<T: Real>(weights: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = weights.shape();
    let (b, k1) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let d = weights.data();
    (0..b)
        .map(|bi| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    let mut val = d[(bi * k1) * plane + p];
                    for k in 1..k1 {
                        let v = d[(bi * k1 + k) * plane + p];
                        if v > val {
                            best = k;
                            val = v;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Differentiable pieces of a rendered scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneDecomposition {
    /// `[B, K+1, 3, h, w]`, background first.
    pub layers: Var,
    /// `[B, K+1, 1, h, w]`, `M_0 = 1`.
    pub masks: Var,
    /// `[B, K+1]`.
    pub alpha: Var,
    /// `[B, K+1, 1, h, w]`.
    pub weights: Var,
    /// `[B, 3, h, w]`.
    pub reconstruction: Var,
}

/// Renders object latents over a background `[B, 3, h, w]`; `alpha0_log` is
/// the scalar `log(alpha_0)`.
pub fn render<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    glimpses: &GlimpseGenerator,
    latents: &ObjectLatents,
    background: Var,
    alpha0_log: Var,
) -> Result<SceneDecomposition> {
    let bs = g.shape(background).to_vec();
    ensure!(bs.len() == 4 && bs[1] == 3, "render", "background must be [B, 3, h, w], got {bs:?}");
    let (b, h, w) = (bs[0], bs[2], bs[3]);
    let zs = g.shape(latents.z_what).to_vec();
    ensure!(zs[0] == b, "render", "latents hold {} images, background {b}", zs[0]);
    let k = zs[1];
    let d_s = g.shape(latents.scale)[2];

    let glimpse = glimpses.forward(g, p, latents.z_what)?;
    let pos = g.reshape(latents.position, &[b * k, 2])?;
    let sc = g.reshape(latents.scale, &[b * k, d_s])?;
    let placed = place_layer(g, glimpse, pos, sc, h, w)?;
    let placed = g.reshape(placed, &[b, k, 4, h, w])?;
    let parts = g.split(placed, 2, &[3, 1])?;
    let bg = g.reshape(background, &[b, 1, 3, h, w])?;
    let layers = g.concat(&[bg, parts[0]], 1)?;
    let ones = g.constant(Tensor::ones(&[b, 1, 1, h, w]));
    let masks = g.concat(&[ones, parts[1]], 1)?;

    let a0 = g.exp(alpha0_log);
    let a0 = g.reshape(a0, &[1, 1])?;
    let a0 = g.broadcast_to(a0, &[b, 1])?;
    let alpha = g.concat(&[a0, latents.alpha], 1)?;
    let (weights, reconstruction) = composite(g, layers, masks, alpha)?;
    Ok(SceneDecomposition {
        layers,
        masks,
        alpha,
        weights,
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_plan() {
        assert_eq!(glimpse_channels(32), vec![64, 32, 16, 8, 4]);
        assert_eq!(glimpse_channels(64), vec![128, 64, 32, 16, 8, 4]);
    }

    #[test]
    fn composite_symmetry_and_empty_masks() {
        let mut g = Graph::<f64>::new();
        let layers = g.constant(Tensor::from_f64(&[1, 2, 3, 1, 1], &[0.2, 0.4, 0.6, 1.0, 0.0, 0.5]).unwrap());
        let masks = g.constant(Tensor::ones(&[1, 2, 1, 1, 1]));
        let alpha = g.constant(Tensor::from_f64(&[1, 2], &[2.0, 2.0]).unwrap());
        let (wts, img) = composite(&mut g, layers, masks, alpha).unwrap();
        assert_eq!(g.value(wts).data(), &[0.5, 0.5]);
        let expect = [0.6, 0.2, 0.55];
        for (a, b) in g.value(img).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let masks = g.constant(Tensor::from_f64(&[1, 2, 1, 1, 1], &[1.0, 0.0]).unwrap());
        let (wts, img) = composite(&mut g, layers, masks, alpha).unwrap();
        assert_eq!(g.value(wts).data(), &[1.0, 0.0]);
        assert_eq!(g.value(img).data(), &[0.2, 0.4, 0.6]);
    }

    #[test]
    fn composite_rejects_non_positive_alpha() {
        let mut g = Graph::<f64>::new();
        let layers = g.constant(Tensor::zeros(&[1, 2, 3, 1, 1]));
        let masks = g.constant(Tensor::ones(&[1, 2, 1, 1, 1]));
        let alpha = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        assert!(composite(&mut g, layers, masks, alpha).is_err());
    }

    #[test]
    fn segmentation_ties_go_low() {
        let w = Tensor::<f64>::from_f64(&[1, 2, 1, 3], &[0.6, 0.5, 0.2, 0.4, 0.5, 0.8]).unwrap();
        assert_eq!(extract_segmentation(&w), vec![vec![0, 0, 1]]);
    }

    #[test]
    fn centered_glimpse_extent() {
        // A glimpse of ones placed at the origin with s = 4 covers the middle
        // quarter of a 33-pixel canvas: normalized half-width 1/4.
        let mut g = Graph::<f64>::new();
        let gl = g.constant(Tensor::ones(&[1, 1, 8, 8]));
        let pos = g.constant(Tensor::zeros(&[1, 2]));
        let sc = g.constant(Tensor::scalar(4.0).reshaped(&[1, 1]).unwrap());
        let out = place_layer(&mut g, gl, pos, sc, 33, 33).unwrap();
        let row: Vec<f64> = g.value(out).data()[16 * 33..17 * 33].to_vec();
        let inside: Vec<usize> = (0..33).filter(|&i| row[i] > 0.999).collect();
        assert_eq!(inside.first(), Some(&12));
        assert_eq!(inside.last(), Some(&20));
    }
}
