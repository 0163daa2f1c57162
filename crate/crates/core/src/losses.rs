//! Reconstruction and pixel-entropy losses and their warmup schedule.

use serde::Serialize;

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Result};

pub const ENTROPY_EPS: f64 = 1e-20;

/// Mean over pixels of the squared channel-summed absolute error.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, recon: Var, target: Var) -> Result<Var> {
    ensure!(
        g.shape(recon) == g.shape(target),
        "reconstruction_loss",
        "shapes {:?} and {:?} differ",
        g.shape(recon),
        g.shape(target)
    );
    ensure!(g.shape(recon).len() == 4, "reconstruction_loss", "expected [B, C, h, w]");
    let diff = g.sub(recon, target)?;
    let abs = g.abs(diff);
    let per_pixel = g.sum_axes(abs, &[1], false)?;
    let sq = g.square(per_pixel);
    Ok(g.mean(sq))
}

/// Mean over pixels of the squared entropy `(sum_k w_k log(w_k + eps))^2` of
/// the layer weights `[B, K+1, 1, h, w]`.
pub fn pixel_entropy_loss<T: Real>(g: &mut Graph<T>, weights: Var) -> Result<Var> {
    ensure!(g.shape(weights).len() >= 2, "pixel_entropy_loss", "expected [B, K+1, ...]");
    let shifted = g.add_scalar(weights, T::cast(ENTROPY_EPS));
    let log = g.log(shifted);
    let prod = g.mul(weights, log)?;
    let neg_entropy = g.sum_axes(prod, &[1], false)?;
    let sq = g.square(neg_entropy);
    Ok(g.mean(sq))
}

/// `min(1, step / n_pixel)^2`.
pub fn warmup_factor(step: usize, n_pixel: usize) -> f64 {
    if n_pixel == 0 {
        return 1.0;
    }
    let r = (step as f64 / n_pixel as f64).min(1.0);
    r * r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub pixel: f64,
    pub warmup_factor: f64,
    pub total: f64,
}

/// Total objective `L_rec + warmup * lambda * L_pixel` as a graph node plus
/// its scalar parts.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    recon: Var,
    target: Var,
    weights: Var,
    step: usize,
    lambda_pixel: f64,
    n_pixel: usize,
) -> Result<(Var, LossBreakdown)> {
    let rec = reconstruction_loss(g, recon, target)?;
    let pix = pixel_entropy_loss(g, weights)?;
    let factor = warmup_factor(step, n_pixel);
    let coef = factor * lambda_pixel;
    let scaled = g.mul_scalar(pix, T::cast(coef));
    let total = g.add(rec, scaled)?;
    let rec_v = g.value(rec).item().to_f64_lossy();
    let pix_v = g.value(pix).item().to_f64_lossy();
    Ok((
        total,
        LossBreakdown {
            rec: rec_v,
            pixel: pix_v,
            warmup_factor: factor,
            total: g.value(total).item().to_f64_lossy(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn reconstruction_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 3, 2, 2], 0.4));
        let y = g.constant(Tensor::full(&[1, 3, 2, 2], 0.5));
        let l = reconstruction_loss(&mut g, y, x).unwrap();
        assert!((g.value(l).item() - 0.09).abs() < 1e-12);
        let z = reconstruction_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
    }

    #[test]
    fn entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let two = g.constant(Tensor::full(&[1, 2, 1, 2, 2], 0.5));
        let l = pixel_entropy_loss(&mut g, two).unwrap();
        assert!((g.value(l).item() - 2f64.ln().powi(2)).abs() < 1e-12);
        let four = g.constant(Tensor::full(&[1, 4, 1, 1, 1], 0.25));
        let l = pixel_entropy_loss(&mut g, four).unwrap();
        assert!((g.value(l).item() - 4f64.ln().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn warmup_values() {
        assert_eq!(warmup_factor(0, 800), 0.0);
        assert_eq!(warmup_factor(400, 800), 0.25);
        assert_eq!(warmup_factor(800, 800), 1.0);
        assert_eq!(warmup_factor(5000, 800), 1.0);
    }
}
