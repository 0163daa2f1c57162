use super::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

/// Sliding-window geometry of a 2-D cross-correlation over one image.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        // iw = ow * stride + kj - pad must lie in [0, w)
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Unfolds `x` (`[channels, h, w]`) into `cols` (`[rows, positions]`).
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        for (ox, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * self.stride + kj - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `cols` back, accumulating into `x`.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let p = self.positions();
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, &v) in line.iter().enumerate().take(hi).skip(lo) {
                            dst[ox * self.stride + kj - self.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum::<T>();
    }
    gb
}

impl<T: Real> Graph<T> {
    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            ensure!(
                self.shape(b) == [channels],
                op,
                "bias shape {:?} does not match {channels} output channels",
                self.shape(b)
            );
        }
        Ok(())
    }

    /// 2-D cross-correlation of `x` `[B, C, H, W]` with `kernel` `[O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        ensure!(xs.len() == 4 && ks.len() == 4, "conv2d", "expected 4-D input and kernel");
        ensure!(stride > 0, "conv2d", "stride must be positive");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        ensure!(ks[1] == c, "conv2d", "kernel expects {} channels, input has {c}", ks[1]);
        ensure!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d",
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        );
        self.check_bias("conv2d", bias, o)?;
        let win = Window::new(c, h, w, kh, kw, stride, pad);
        let (rows, p) = (win.rows(), win.positions());

        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); b * o * p];
        let mut cols = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for i in 0..b {
            let xi = &xv[i * c * h * w..(i + 1) * c * h * w];
            let src = if win.is_pointwise() {
                xi
            } else {
                win.im2col(xi, &mut cols);
                &cols
            };
            T::gemm(o, rows, p, T::one(), kv, (rows, 1), src, (p, 1), T::zero(), &mut out[i * o * p..], (p, 1));
        }
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), p);
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let out = Tensor::from_parts(vec![b, o, win.oh, win.ow], out);
        Ok(self.push(out, &inputs, move |ctx, g| {
            let xv = ctx.value(x).data();
            let kv = ctx.value(kernel).data();
            let need_x = ctx.needs(x);
            let need_k = ctx.needs(kernel);
            let mut gk = if need_k { vec![T::zero(); kv.len()] } else { Vec::new() };
            let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            let mut cols = vec![T::zero(); rows * p];
            for i in 0..b {
                let gi = &g[i * o * p..(i + 1) * o * p];
                let xi = &xv[i * c * h * w..(i + 1) * c * h * w];
                if need_k {
                    let src = if win.is_pointwise() {
                        xi
                    } else {
                        win.im2col(xi, &mut cols);
                        &cols
                    };
                    T::gemm(o, p, rows, T::one(), gi, (p, 1), src, (1, p), T::one(), &mut gk, (rows, 1));
                }
                if need_x {
                    let gxi = &mut gx[i * c * h * w..(i + 1) * c * h * w];
                    if win.is_pointwise() {
                        T::gemm(rows, o, p, T::one(), kv, (1, rows), gi, (p, 1), T::one(), gxi, (p, 1));
                    } else {
                        T::gemm(rows, o, p, T::one(), kv, (1, rows), gi, (p, 1), T::zero(), &mut cols, (p, 1));
                        win.col2im(&cols, gxi);
                    }
                }
            }
            if need_k {
                ctx.accumulate_owned(kernel, gk);
            }
            if need_x {
                ctx.accumulate_owned(x, gx);
            }
            if let Some(bv) = bias {
                if ctx.needs(bv) {
                    ctx.accumulate_owned(bv, bias_grad(g, o, p));
                }
            }
        }))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// `kernel` `[C_in, C_out, kh, kw]`. Output size is
    /// `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        ensure!(
            xs.len() == 4 && ks.len() == 4,
            "conv_transpose2d",
            "expected 4-D input and kernel"
        );
        ensure!(stride > 0, "conv_transpose2d", "stride must be positive");
        let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ks[1], ks[2], ks[3]);
        ensure!(
            ks[0] == ci,
            "conv_transpose2d",
            "kernel expects {} input channels, input has {ci}",
            ks[0]
        );
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        ensure!(
            full_h > 2 * pad && full_w > 2 * pad,
            "conv_transpose2d",
            "padding {pad} leaves an empty output"
        );
        self.check_bias("conv_transpose2d", bias, co)?;
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let win = Window::new(co, oh, ow, kh, kw, stride, pad);
        debug_assert_eq!((win.oh, win.ow), (h, w));
        let (rows, p) = (win.rows(), h * w);
        let plane_out = oh * ow;

        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); b * co * plane_out];
        let mut cols = vec![T::zero(); rows * p];
        for i in 0..b {
            let xi = &xv[i * ci * p..(i + 1) * ci * p];
            T::gemm(rows, ci, p, T::one(), kv, (1, rows), xi, (p, 1), T::zero(), &mut cols, (p, 1));
            win.col2im(&cols, &mut out[i * co * plane_out..(i + 1) * co * plane_out]);
        }
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), plane_out);
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let out = Tensor::from_parts(vec![b, co, oh, ow], out);
        Ok(self.push(out, &inputs, move |ctx, g| {
            let xv = ctx.value(x).data();
            let kv = ctx.value(kernel).data();
            let need_x = ctx.needs(x);
            let need_k = ctx.needs(kernel);
            let mut gk = if need_k { vec![T::zero(); kv.len()] } else { Vec::new() };
            let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            let mut cols = vec![T::zero(); rows * p];
            for i in 0..b {
                win.im2col(&g[i * co * plane_out..(i + 1) * co * plane_out], &mut cols);
                if need_x {
                    T::gemm(ci, rows, p, T::one(), kv, (rows, 1), &cols, (p, 1), T::zero(), &mut gx[i * ci * p..], (p, 1));
                }
                if need_k {
                    let xi = &xv[i * ci * p..(i + 1) * ci * p];
                    T::gemm(ci, p, rows, T::one(), xi, (p, 1), &cols, (1, p), T::one(), &mut gk, (rows, 1));
                }
            }
            if need_k {
                ctx.accumulate_owned(kernel, gk);
            }
            if need_x {
                ctx.accumulate_owned(x, gx);
            }
            if let Some(bv) = bias {
                if ctx.needs(bv) {
                    ctx.accumulate_owned(bv, bias_grad(g, co, plane_out));
                }
            }
        }))
    }
}
