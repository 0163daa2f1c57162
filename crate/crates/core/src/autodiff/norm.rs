use super::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

/// How the affine parameters index into a normalized block.
#[derive(Clone, Copy, Debug)]
enum Affine {
    /// Group norm: block `b` is group `b % groups` of a sample; element `j`
    /// belongs to channel `group * per_group + j / spatial`.
    Channels { groups: usize, per_group: usize, spatial: usize },
    /// Layer norm: one parameter per element of the block.
    Element,
    /// One parameter per block (batch norm over a permuted layout).
    Block,
}

impl Affine {
    #[inline]
    fn index(self, block: usize, j: usize) -> usize {
        match self {
            Affine::Channels { groups, per_group, spatial } => (block % groups) * per_group + j / spatial,
            Affine::Element => j,
            Affine::Block => block,
        }
    }
}

struct Stats<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> Graph<T> {
    /// Normalizes each contiguous block of `block` elements to zero mean and
    /// unit (biased) variance, then applies `gamma * x + beta`.
    fn normalize_blocks(
        &mut self,
        x: Var,
        block: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
        affine: Affine,
    ) -> (Var, Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let eps = T::cast(eps);
        let inv_n = T::cast(1.0 / block as f64);
        let nblocks = xv.len() / block;
        let mut stats = Stats {
            mean: Vec::with_capacity(nblocks),
            rstd: Vec::with_capacity(nblocks),
        };
        let mut var_out = Vec::with_capacity(nblocks);
        let mut out = vec![T::zero(); xv.len()];
        for (bi, (src, dst)) in xv.chunks(block).zip(out.chunks_mut(block)).enumerate() {
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                let p = affine.index(bi, j);
                *d = (s - mean) * rstd * gv[p] + bv[p];
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            var_out.push(var);
        }
        let means = stats.mean.clone();
        let out = Tensor::from_parts(self.shape(x).to_vec(), out);
        let y = self.push(out, &[x, gamma, beta], move |ctx, g| {
            let xv = ctx.value(x).data();
            let gv = ctx.value(gamma).data();
            let mut ggamma = vec![T::zero(); gv.len()];
            let mut gbeta = vec![T::zero(); gv.len()];
            let need_x = ctx.needs(x);
            let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            for bi in 0..nblocks {
                let (mean, rstd) = (stats.mean[bi], stats.rstd[bi]);
                let src = &xv[bi * block..(bi + 1) * block];
                let gb = &g[bi * block..(bi + 1) * block];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..block {
                    let p = affine.index(bi, j);
                    let xhat = (src[j] - mean) * rstd;
                    ggamma[p] += gb[j] * xhat;
                    gbeta[p] += gb[j];
                    let dxhat = gb[j] * gv[p];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if need_x {
                    let (m1, m2) = (sum_dxhat * inv_n, sum_dxhat_xhat * inv_n);
                    for j in 0..block {
                        let p = affine.index(bi, j);
                        let xhat = (src[j] - mean) * rstd;
                        gx[bi * block + j] = rstd * (gb[j] * gv[p] - m1 - xhat * m2);
                    }
                }
            }
            if need_x {
                ctx.accumulate_owned(x, gx);
            }
            ctx.accumulate_owned(gamma, ggamma);
            ctx.accumulate_owned(beta, gbeta);
        });
        (y, means, var_out)
    }

    /// Group normalization of `x` `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() >= 2, "group_norm", "expected [N, C, ...], got {shape:?}");
        let c = shape[1];
        ensure!(
            groups > 0 && c % groups == 0,
            "group_norm",
            "{c} channels are not divisible into {groups} groups"
        );
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "group_norm",
            "affine parameters must have shape [{c}]"
        );
        let spatial: usize = shape[2..].iter().product();
        let per_group = c / groups;
        let affine = Affine::Channels { groups, per_group, spatial };
        Ok(self.normalize_blocks(x, per_group * spatial, gamma, beta, eps, affine).0)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        ensure!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            "layer_norm",
            "affine parameters must have shape [{d}]"
        );
        Ok(self.normalize_blocks(x, d, gamma, beta, eps, Affine::Element).0)
    }

    /// Batch normalization of `x` `[N, C, H, W]`.
    ///
    /// In a training graph the batch statistics are used and the updated
    /// running statistics are recorded against the buffer leaves; otherwise
    /// the running statistics normalize the input.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() == 4, "batch_norm", "expected [N, C, H, W], got {shape:?}");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for v in [gamma, beta, running_mean, running_var] {
            ensure!(self.shape(v) == [c], "batch_norm", "parameters must have shape [{c}]");
        }
        if self.training {
            let cm = self.permute(x, &[1, 0, 2, 3])?;
            let (y, mean, var) = self.normalize_blocks(cm, n * h * w, gamma, beta, eps, Affine::Block);
            let count = (n * h * w) as f64;
            let unbias = T::cast(count / (count - 1.0).max(1.0));
            let m = T::cast(momentum);
            let rm: Vec<T> = self
                .value(running_mean)
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| (T::one() - m) * r + m * b)
                .collect();
            let rv: Vec<T> = self
                .value(running_var)
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                .collect();
            self.record_buffer_update(running_mean, Tensor::from_parts(vec![c], rm));
            self.record_buffer_update(running_var, Tensor::from_parts(vec![c], rv));
            self.permute(y, &[1, 0, 2, 3])
        } else {
            let eps = T::cast(eps);
            let rstd: Vec<T> = self
                .value(running_var)
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            let mean = self.value(running_mean).data().to_vec();
            let mean = self.constant(Tensor::from_parts(vec![c, 1, 1], mean));
            let rstd = self.constant(Tensor::from_parts(vec![c, 1, 1], rstd));
            let centered = self.sub(x, mean)?;
            let xhat = self.mul(centered, rstd)?;
            let scale = self.reshape(gamma, &[c, 1, 1])?;
            let shift = self.reshape(beta, &[c, 1, 1])?;
            let y = self.mul(xhat, scale)?;
            self.add(y, shift)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4, 3, 3], 5.0));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_group_unit_moments() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..48).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let x = g.constant(Tensor::from_f64(&[1, 3, 4, 4], &data).unwrap());
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.group_norm(x, 1, gamma, beta, 1e-5).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 48.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 48.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn indivisible_groups_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let gamma = g.constant(Tensor::ones(&[6]));
        let beta = g.constant(Tensor::zeros(&[6]));
        assert!(g.group_norm(x, 4, gamma, beta, 1e-5).is_err());
    }
}
