use super::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

/// Bilinear corner weights and indices for one sampling location.
struct Taps<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

fn taps<T: Real>(gx: T, gy: T, w: usize, h: usize) -> Taps<T> {
    let half = T::cast(0.5);
    let px = (gx + T::one()) * half * T::cast((w - 1) as f64);
    let py = (gy + T::one()) * half * T::cast((h - 1) as f64);
    let fx0 = px.floor();
    let fy0 = py.floor();
    Taps {
        x0: fx0.to_isize().unwrap_or(isize::MIN / 2),
        y0: fy0.to_isize().unwrap_or(isize::MIN / 2),
        fx: px - fx0,
        fy: py - fy0,
    }
}

#[inline]
fn fetch<T: Real>(plane: &[T], w: usize, h: usize, x: isize, y: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

impl<T: Real> Graph<T> {
    /// Samples `source` `[N, C, Hs, Ws]` at the normalized locations in `grid`
    /// `[N, Ho, Wo, 2]` (last axis is `(x, y)`), producing `[N, C, Ho, Wo]`.
    ///
    /// Coordinates map `-1` and `+1` onto the centers of the first and last
    /// source pixels. Taps that fall outside the source read zero, so any
    /// location more than one pixel pitch outside `[-1, 1]` samples exactly 0.
    pub fn grid_sample(&mut self, source: Var, grid: Var) -> Result<Var> {
        let ss = self.shape(source).to_vec();
        let gs = self.shape(grid).to_vec();
        ensure!(ss.len() == 4, "grid_sample", "source must be [N, C, H, W], got {ss:?}");
        ensure!(
            gs.len() == 4 && gs[3] == 2 && gs[0] == ss[0],
            "grid_sample",
            "grid must be [{}, Ho, Wo, 2], got {gs:?}",
            ss[0]
        );
        ensure!(
            self.value(grid).all_finite(),
            "grid_sample",
            "grid contains non-finite coordinates"
        );
        ensure!(ss[2] > 1 && ss[3] > 1, "grid_sample", "source must be at least 2x2");
        let (n, c, hs, ws) = (ss[0], ss[1], ss[2], ss[3]);
        let (ho, wo) = (gs[1], gs[2]);
        let (plane_in, plane_out) = (hs * ws, ho * wo);

        let sv = self.value(source).data();
        let gv = self.value(grid).data();
        let mut out = vec![T::zero(); n * c * plane_out];
        for b in 0..n {
            for p in 0..plane_out {
                let gi = (b * plane_out + p) * 2;
                let t = taps(gv[gi], gv[gi + 1], ws, hs);
                let (wx1, wy1) = (t.fx, t.fy);
                let (wx0, wy0) = (T::one() - wx1, T::one() - wy1);
                for ch in 0..c {
                    let plane = &sv[(b * c + ch) * plane_in..(b * c + ch + 1) * plane_in];
                    let v = fetch(plane, ws, hs, t.x0, t.y0) * wx0 * wy0
                        + fetch(plane, ws, hs, t.x0 + 1, t.y0) * wx1 * wy0
                        + fetch(plane, ws, hs, t.x0, t.y0 + 1) * wx0 * wy1
                        + fetch(plane, ws, hs, t.x0 + 1, t.y0 + 1) * wx1 * wy1;
                    out[(b * c + ch) * plane_out + p] = v;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.push(out, &[source, grid], move |ctx, g| {
            let sv = ctx.value(source).data();
            let gv = ctx.value(grid).data();
            let need_src = ctx.needs(source);
            let need_grid = ctx.needs(grid);
            let mut gsrc = if need_src { vec![T::zero(); sv.len()] } else { Vec::new() };
            let mut ggrid = if need_grid { vec![T::zero(); gv.len()] } else { Vec::new() };
            let sx = T::cast(0.5 * (ws - 1) as f64);
            let sy = T::cast(0.5 * (hs - 1) as f64);
            for b in 0..n {
                for p in 0..plane_out {
                    let gi = (b * plane_out + p) * 2;
                    let t = taps(gv[gi], gv[gi + 1], ws, hs);
                    let (wx1, wy1) = (t.fx, t.fy);
                    let (wx0, wy0) = (T::one() - wx1, T::one() - wy1);
                    let corners = [
                        (t.x0, t.y0, wx0 * wy0),
                        (t.x0 + 1, t.y0, wx1 * wy0),
                        (t.x0, t.y0 + 1, wx0 * wy1),
                        (t.x0 + 1, t.y0 + 1, wx1 * wy1),
                    ];
                    let (mut dgx, mut dgy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let go = g[(b * c + ch) * plane_out + p];
                        if go.is_zero() {
                            continue;
                        }
                        let base = (b * c + ch) * plane_in;
                        if need_src {
                            for &(x, y, wgt) in &corners {
                                if x >= 0 && y >= 0 && x < ws as isize && y < hs as isize {
                                    gsrc[base + y as usize * ws + x as usize] += go * wgt;
                                }
                            }
                        }
                        if need_grid {
                            let plane = &sv[base..base + plane_in];
                            let v00 = fetch(plane, ws, hs, t.x0, t.y0);
                            let v10 = fetch(plane, ws, hs, t.x0 + 1, t.y0);
                            let v01 = fetch(plane, ws, hs, t.x0, t.y0 + 1);
                            let v11 = fetch(plane, ws, hs, t.x0 + 1, t.y0 + 1);
                            dgx += go * ((v10 - v00) * wy0 + (v11 - v01) * wy1);
                            dgy += go * ((v01 - v00) * wx0 + (v11 - v10) * wx1);
                        }
                    }
                    if need_grid {
                        ggrid[gi] = dgx * sx;
                        ggrid[gi + 1] = dgy * sy;
                    }
                }
            }
            if need_src {
                ctx.accumulate_owned(source, gsrc);
            }
            if need_grid {
                ctx.accumulate_owned(grid, ggrid);
            }
        }))
    }
}
