use super::elementwise::broadcast_index;
use super::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Flat source offsets visited when walking `out_shape` in row-major order
/// with per-axis source `strides`.
fn strided_index(out_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            pos += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            pos -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into (outer, axis, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), &[x], move |ctx, g| {
            if ctx.needs(x) {
                let n = ctx.value(x).numel();
                ctx.accumulate_owned(x, vec![g[0]; n]);
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.mul_scalar(s, T::cast(1.0 / n as f64))
    }

    /// Sums over `axes`. Reduced axes are kept with size 1 when `keepdim`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(
            axes.iter().all(|&a| a < shape.len()),
            "sum_axes",
            "axes {axes:?} out of range for {shape:?}"
        );
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        // Map every input element onto its output slot.
        let out_strides = contiguous_strides(&kept);
        let strides: Vec<usize> = (0..shape.len())
            .map(|i| if axes.contains(&i) { 0 } else { out_strides[i] })
            .collect();
        let map = strided_index(&shape, &strides);
        let mut out = vec![T::zero(); kept.iter().product()];
        for (&v, &j) in self.value(x).data().iter().zip(&map) {
            out[j] += v;
        }
        let out_shape: Vec<usize> = if keepdim {
            kept
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), &[x], move |ctx, g| {
            if ctx.needs(x) {
                let gx: Vec<T> = map.iter().map(|&j| g[j]).collect();
                ctx.accumulate_owned(x, gx);
            }
        }))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes, keepdim)?;
        Ok(self.mul_scalar(s, T::cast(1.0 / count as f64)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.value(x).numel() && shape.iter().all(|&d| d > 0),
            "reshape",
            "cannot view {:?} as {shape:?}",
            self.shape(x)
        );
        let out = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        Ok(self.push(out, &[x], move |ctx, g| ctx.accumulate(x, g)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        ensure!(
            perm.len() == shape.len() && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true)),
            "permute",
            "{perm:?} is not a permutation of {} axes",
            shape.len()
        );
        let in_strides = contiguous_strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = strided_index(&out_shape, &strides);
        let xv = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&j| xv[j]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, out), &[x], move |ctx, g| {
            if ctx.needs(x) {
                let mut gx = vec![T::zero(); g.len()];
                for (&j, &gi) in map.iter().zip(g) {
                    gx[j] = gi;
                }
                ctx.accumulate_owned(x, gx);
            }
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        ensure!(rank >= 2, "transpose_last", "need rank >= 2");
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat", "nothing to concatenate");
        let first = self.shape(xs[0]).to_vec();
        ensure!(axis < first.len(), "concat", "axis {axis} out of range");
        for &v in &xs[1..] {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat",
                "shape {s:?} incompatible with {first:?} along axis {axis}"
            );
        }
        let (outer, _, inner) = around(&first, axis);
        let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let inputs = xs.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), xs, move |ctx, g| {
            let mut offset = 0;
            for (&v, &len) in inputs.iter().zip(&sizes) {
                if ctx.needs(v) {
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gv.extend_from_slice(&g[base..base + len * inner]);
                    }
                    ctx.accumulate_owned(v, gv);
                }
                offset += len;
            }
        }))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), "slice", "axis {axis} out of range for {shape:?}");
        ensure!(
            len > 0 && start + len <= shape[axis],
            "slice",
            "range {start}..{} exceeds axis of size {}",
            start + len,
            shape[axis]
        );
        let (outer, size, inner) = around(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, out), &[x], move |ctx, gout| {
            if ctx.needs(x) {
                let gx = ctx.grad(x);
                for o in 0..outer {
                    let base = (o * size + start) * inner;
                    let src = &gout[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let dim = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::contract("split", format!("axis {axis} out of range")))?;
        ensure!(total == dim, "split", "sizes {sizes:?} do not sum to {dim}");
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let compatible = src.len() <= shape.len()
            && src
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&s, &d)| s == d || s == 1);
        ensure!(compatible, "broadcast_to", "cannot broadcast {src:?} to {shape:?}");
        let map = broadcast_index(shape, &src);
        let xv = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&j| xv[j]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), &[x], move |ctx, g| {
            if ctx.needs(x) {
                let gx = ctx.grad(x);
                for (&j, &gi) in map.iter().zip(g) {
                    gx[j] += gi;
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_axes_keepdim() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let r = g.sum_axes(x, &[1], true).unwrap();
        assert_eq!(g.shape(r), &[2, 1]);
        assert_eq!(g.value(r).data(), &[6., 15.]);
        let c = g.sum_axes(x, &[0], false).unwrap();
        assert_eq!(g.shape(c), &[3]);
        assert_eq!(g.value(c).data(), &[5., 7., 9.]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>()));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], 1. * 12. + 2. * 4. + 1.);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 1], &[1., 2.]));
        let b = g.leaf(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let parts = g.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(g.value(parts[0]).data(), g.value(a).data());
        assert_eq!(g.value(parts[1]).data(), g.value(b).data());
        assert!(g.split(c, 1, &[1, 1]).is_err());
    }

    #[test]
    fn slice_bounds_checked() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[3, 4]));
        assert!(g.slice(x, 1, 3, 2).is_err());
        assert!(g.slice(x, 2, 0, 1).is_err());
    }

    #[test]
    fn broadcast_to_sums_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2], &[1., 2.]));
        let b = g.broadcast_to(x, &[3, 2]).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 3.]);
    }
}
