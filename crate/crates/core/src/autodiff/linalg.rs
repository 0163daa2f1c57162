use super::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

impl<T: Real> Graph<T> {
    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or carries
    /// the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        ensure!(
            sa.len() >= 2 && sb.len() >= 2,
            "matmul",
            "operands must be at least 2-D, got {sa:?} and {sb:?}"
        );
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        ensure!(k == kb, "matmul", "inner dimensions differ: {sa:?} x {sb:?}");
        let shared = sb.len() == 2;
        ensure!(
            shared || sa[..sa.len() - 2] == sb[..sb.len() - 2],
            "matmul",
            "batch dimensions differ: {sa:?} x {sb:?}"
        );
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            T::gemm(batch * m, k, n, T::one(), av, (k, 1), bv, (n, 1), T::zero(), &mut out, (n, 1));
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..],
                    (k, 1),
                    &bv[i * k * n..],
                    (n, 1),
                    T::zero(),
                    &mut out[i * m * n..],
                    (n, 1),
                );
            }
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), &[a, b], move |ctx, g| {
            let av = ctx.value(a).data();
            let bv = ctx.value(b).data();
            if ctx.needs(a) {
                let mut ga = vec![T::zero(); av.len()];
                if shared {
                    T::gemm(batch * m, n, k, T::one(), g, (n, 1), bv, (1, n), T::zero(), &mut ga, (k, 1));
                } else {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..],
                            (n, 1),
                            &bv[i * k * n..],
                            (1, n),
                            T::zero(),
                            &mut ga[i * m * k..],
                            (k, 1),
                        );
                    }
                }
                ctx.accumulate_owned(a, ga);
            }
            if ctx.needs(b) {
                let mut gb = vec![T::zero(); bv.len()];
                if shared {
                    T::gemm(k, batch * m, n, T::one(), av, (1, k), g, (n, 1), T::zero(), &mut gb, (n, 1));
                } else {
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * m * k..],
                            (1, k),
                            &g[i * m * n..],
                            (n, 1),
                            T::zero(),
                            &mut gb[i * k * n..],
                            (n, 1),
                        );
                    }
                }
                ctx.accumulate_owned(b, gb);
            }
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row = *shape.last().expect("tensors have rank >= 1");
        let xv = self.value(x).data();
        ensure!(
            xv.iter().all(|v| v.is_finite()),
            "softmax",
            "input contains non-finite values"
        );
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.chunks(row) {
            let max = r.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(r.iter().map(|&v| (v - max).exp()));
            let total: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[x], move |ctx, g| {
            if !ctx.needs(x) {
                return;
            }
            let y = ctx.output().data();
            let mut gx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(row).zip(g.chunks(row)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            ctx.accumulate_owned(x, gx);
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.leaf(Tensor::from_f64(&[3, 2], &[7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        // d sum / d a[i][j] = sum_n b[j][n]
        assert_eq!(g.grad(a).unwrap(), &[15., 19., 23., 15., 19., 23.]);
        assert_eq!(g.grad(b).unwrap(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn matmul_shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.leaf(Tensor::zeros(&[4, 3, 2]));
        let d = g.leaf(Tensor::zeros(&[5, 2, 3]));
        assert!(g.matmul(c, d).is_err());
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 3.0f64.ln(), 1.0f64.ln()]).unwrap());
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap());
        assert!(g.softmax(x).is_err());
    }
}
