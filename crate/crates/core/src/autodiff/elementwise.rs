use super::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Shape produced by trailing-dimension broadcasting of `a` and `b`.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
pub(crate) fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    // Source strides aligned to output axes; stretched axes get stride 0.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            pos += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    fn binary<F, DA, DB>(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: F,
        da: DA,
        db: DB,
    ) -> Result<Var>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T, T) -> T + 'static,
        DB: Fn(T, T, T) -> T + 'static,
    {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (shape, ia, ib) = if sa == sb {
            (sa, None, None)
        } else {
            let shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
                Error::contract(op, format!("cannot broadcast {sa:?} with {sb:?}"))
            })?;
            let ia = (sa != shape).then(|| broadcast_index(&shape, &sa));
            let ib = (sb != shape).then(|| broadcast_index(&shape, &sb));
            (shape, ia, ib)
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = shape.iter().product();
        let out: Vec<T> = match (&ia, &ib) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(av[at(&ia, i)], bv[at(&ib, i)])).collect(),
        };
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], move |ctx, g| {
            let av = ctx.value(a).data();
            let bv = ctx.value(b).data();
            let y = ctx.output().data();
            if ctx.needs(a) {
                let mut ga = vec![T::zero(); av.len()];
                for i in 0..g.len() {
                    let (j, k) = (at(&ia, i), at(&ib, i));
                    ga[j] += g[i] * da(av[j], bv[k], y[i]);
                }
                ctx.accumulate_owned(a, ga);
            }
            if ctx.needs(b) {
                let mut gb = vec![T::zero(); bv.len()];
                for i in 0..g.len() {
                    let (j, k) = (at(&ia, i), at(&ib, i));
                    gb[k] += g[i] * db(av[j], bv[k], y[i]);
                }
                ctx.accumulate_owned(b, gb);
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |_, y, _| T::one() / y,
            |_, y, out| -out / y,
        )
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out = self.value(x).map(f);
        self.push(out, &[x], move |ctx, g| {
            let xv = ctx.value(x).data();
            let y = ctx.output().data();
            let gx: Vec<T> = g
                .iter()
                .zip(xv.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            ctx.accumulate_owned(x, gx);
        })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Continuously differentiable exponential linear unit with alpha = 1.
    pub fn celu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), |_, y| T::cast(0.5) / y)
    }

    /// Clamps into `[lo, hi]`. The gradient passes through on the closed
    /// interval and is zero outside it.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    /// Inverted dropout driven by a caller-supplied uniform sample per element.
    pub fn dropout(&mut self, x: Var, p: f64, uniforms: &[f64]) -> Result<Var> {
        ensure!(
            uniforms.len() == self.value(x).numel(),
            "dropout",
            "need one uniform per element"
        );
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::cast(1.0 / (1.0 - p));
        let mask: Vec<T> = uniforms
            .iter()
            .map(|&u| if u >= p { keep } else { T::zero() })
            .collect();
        let mask = self.constant(Tensor::from_parts(self.shape(x).to_vec(), mask));
        self.mul(x, mask)
    }
}
