//! Attention normalization, soft-argmax localization, attention-weighted
//! feature pooling and the translation group acting on maps.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};
use crate::params::seeded_rng;

/// Normalized pixel coordinate `2 i / (n - 1) - 1`; a single pixel sits at 0.
pub fn coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Pixel-center coordinates of an `h x w` map in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl CoordinateGrid {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            xs: (0..w).map(|i| coord(i, w)).collect(),
            ys: (0..h).map(|j| coord(j, h)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.xs.len()
    }

    pub fn height(&self) -> usize {
        self.ys.len()
    }

    /// Grid spacing `(dx, dy)`.
    pub fn pitch(&self) -> (f64, f64) {
        let step = |n: usize| if n > 1 { 2.0 / (n - 1) as f64 } else { 0.0 };
        (step(self.width()), step(self.height()))
    }

    /// `[h * w, 2]` matrix of `(x, y)` rows in row-major pixel order.
    pub fn matrix<T: Real>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.xs.len() * self.ys.len() * 2);
        for &y in &self.ys {
            for &x in &self.xs {
                data.push(T::cast(x));
                data.push(T::cast(y));
            }
        }
        Tensor::new(&[self.ys.len() * self.xs.len(), 2], data).expect("grid is non-empty")
    }
}

fn spatial(g: &Graph<impl Real>, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = g.shape(v);
    ensure!(s.len() == 4, op, "expected [B, K, H, W], got {s:?}");
    Ok((s[0], s[1], s[2], s[3]))
}

/// Softmax of each `[H, W]` logit map over its joint spatial extent.
pub fn normalize_attention<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let (b, k, h, w) = spatial(g, logits, "normalize_attention")?;
    ensure!(
        g.value(logits).all_finite(),
        "normalize_attention",
        "logits must be finite"
    );
    let flat = g.reshape(logits, &[b, k, h * w])?;
    let soft = g.softmax(flat)?;
    g.reshape(soft, &[b, k, h, w])
}

/// Expected grid coordinates under each attention map: `[B, K, 2]` with the
/// last axis holding `(x, y)`.
pub fn soft_argmax<T: Real>(g: &mut Graph<T>, attention: Var, grid: &CoordinateGrid) -> Result<Var> {
    let (b, k, h, w) = spatial(g, attention, "soft_argmax")?;
    ensure!(
        grid.height() == h && grid.width() == w,
        "soft_argmax",
        "grid is {}x{} but maps are {h}x{w}",
        grid.height(),
        grid.width()
    );
    let flat = g.reshape(attention, &[b, k, h * w])?;
    let coords = g.constant(grid.matrix());
    g.matmul(flat, coords)
}

/// Attention-weighted feature vectors `[B, K, D]` from features `[B, D, H, W]`.
pub fn aggregate_features<T: Real>(g: &mut Graph<T>, attention: Var, features: Var) -> Result<Var> {
    let (b, k, h, w) = spatial(g, attention, "aggregate_features")?;
    let fs = g.shape(features).to_vec();
    ensure!(
        fs.len() == 4 && fs[0] == b && fs[2] == h && fs[3] == w,
        "aggregate_features",
        "features {fs:?} do not match attention [{b}, {k}, {h}, {w}]"
    );
    let a = g.reshape(attention, &[b, k, h * w])?;
    let f = g.reshape(features, &[b, fs[1], h * w])?;
    let f = g.transpose_last(f)?;
    g.matmul(a, f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    /// Indices wrap around the map.
    Circular,
    /// Vacated cells take the map's minimum value.
    ZeroPad,
}

/// `T_{u,v}(phi)(i, j) = phi(i - u, j - v)` on a row-major `h x w` map, with
/// `i` the column (x) index and `j` the row (y) index.
pub fn translate_map(map: &[f64], h: usize, w: usize, u: isize, v: isize, mode: ShiftMode) -> Result<Vec<f64>> {
    ensure!(map.len() == h * w, "translate_map", "map has {} values, expected {}", map.len(), h * w);
    ensure!(
        u.unsigned_abs() < w && v.unsigned_abs() < h,
        "translate_map",
        "shift ({u}, {v}) out of range for a {h}x{w} map"
    );
    let fill = map.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = vec![fill; h * w];
    for j in 0..h {
        for i in 0..w {
            let si = i as isize - u;
            let sj = j as isize - v;
            let src = match mode {
                ShiftMode::Circular => Some((si.rem_euclid(w as isize), sj.rem_euclid(h as isize))),
                ShiftMode::ZeroPad => {
                    (si >= 0 && sj >= 0 && si < w as isize && sj < h as isize).then_some((si, sj))
                }
            };
            if let Some((si, sj)) = src {
                out[j * w + i] = map[sj as usize * w + si as usize];
            }
        }
    }
    Ok(out)
}

/// `M(phi) = sum_p phi(p) p`, linear in `phi`.
pub fn center_of_mass(map: &[f64], grid: &CoordinateGrid) -> (f64, f64) {
    let w = grid.width();
    let mut mx = 0.0;
    let mut my = 0.0;
    for (p, &m) in map.iter().enumerate() {
        mx += m * grid.xs[p % w];
        my += m * grid.ys[p / w];
    }
    (mx, my)
}

/// Maximum deviations observed by [`check_proposition1`].
#[derive(Clone, Debug, Serialize)]
pub struct Prop1Report {
    pub trials: usize,
    /// `|M(a phi + (1 - a) psi) - a M(phi) - (1 - a) M(psi)|`.
    pub affinity: f64,
    /// Shifted Dirac masses against the exact grid displacement.
    pub dirac_shift: f64,
    /// Circular shift of interior-supported maps against the displacement.
    pub com_shift: f64,
    /// Same for soft-argmax over shifted logits.
    pub soft_argmax_shift: f64,
    /// Largest departure of soft-argmax from affinity in its logits; a
    /// positive value shows soft-argmax itself is not affine.
    pub soft_argmax_nonaffinity: f64,
}

impl Prop1Report {
    pub fn passed(&self) -> bool {
        self.affinity < 1e-12
            && self.dirac_shift < 1e-12
            && self.com_shift < 1e-12
            && self.soft_argmax_shift < 1e-6
            && self.soft_argmax_nonaffinity > 1e-6
    }
}

fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Random map supported on the window `[m, n - m)` in both axes so that
/// shifts of magnitude below `m` never wrap mass across the border.
fn interior_map(rng: &mut impl Rng, h: usize, w: usize, margin: usize, outside: f64, logits: bool) -> Vec<f64> {
    let mut map = vec![outside; h * w];
    for j in margin..h - margin {
        for i in margin..w - margin {
            map[j * w + i] = if logits {
                rng.gen_range(-3.0..3.0)
            } else {
                rng.gen_range(0.0..1.0)
            };
        }
    }
    if !logits {
        let total: f64 = map.iter().sum();
        map.iter_mut().for_each(|v| *v /= total);
    }
    map
}

fn soft_argmax_map(logits: &[f64], h: usize, w: usize, grid: &CoordinateGrid) -> Result<(f64, f64)> {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::new(&[1, 1, h, w], logits.to_vec())?);
    let a = normalize_attention(&mut g, l)?;
    let c = soft_argmax(&mut g, a, grid)?;
    let v = g.value(c).data();
    Ok((v[0], v[1]))
}

/// Executable checks of the localization properties: the center-of-mass
/// operator is affine and translation equivariant, while soft-argmax over
/// logits is equivariant but not affine.
pub fn check_proposition1(trials: usize, sizes: &[(usize, usize)], seed: u64) -> Result<Prop1Report> {
    ensure!(!sizes.is_empty(), "check_proposition1", "need at least one map size");
    let mut rng = seeded_rng(seed, 0);
    let mut report = Prop1Report {
        trials,
        affinity: 0.0,
        dirac_shift: 0.0,
        com_shift: 0.0,
        soft_argmax_shift: 0.0,
        soft_argmax_nonaffinity: 0.0,
    };
    let dev = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs().max((a.1 - b.1).abs());
    for t in 0..trials {
        let (h, w) = sizes[t % sizes.len()];
        ensure!(h >= 4 && w >= 4, "check_proposition1", "maps must be at least 4x4");
        let grid = CoordinateGrid::new(h, w);
        let (dx, dy) = grid.pitch();

        let phi = random_distribution(&mut rng, h * w);
        let psi = random_distribution(&mut rng, h * w);
        let a: f64 = rng.gen_range(-2.0..2.0);
        let mix: Vec<f64> = phi.iter().zip(&psi).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let (mp, mq) = (center_of_mass(&phi, &grid), center_of_mass(&psi, &grid));
        let lhs = center_of_mass(&mix, &grid);
        let rhs = (a * mp.0 + (1.0 - a) * mq.0, a * mp.1 + (1.0 - a) * mq.1);
        report.affinity = report.affinity.max(dev(lhs, rhs));

        let (pi, pj) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let u = rng.gen_range(-(pi as isize)..(w - pi) as isize);
        let v = rng.gen_range(-(pj as isize)..(h - pj) as isize);
        let mut delta = vec![0.0; h * w];
        delta[pj * w + pi] = 1.0;
        let moved = translate_map(&delta, h, w, u, v, ShiftMode::Circular)?;
        let m0 = center_of_mass(&delta, &grid);
        let m1 = center_of_mass(&moved, &grid);
        report.dirac_shift = report.dirac_shift.max(dev((m1.0 - m0.0, m1.1 - m0.1), (u as f64 * dx, v as f64 * dy)));

        let margin = (h.min(w) / 4).max(1);
        let shift = margin as isize;
        let u = rng.gen_range(-shift + 1..shift);
        let v = rng.gen_range(-shift + 1..shift);
        let map = interior_map(&mut rng, h, w, margin, 0.0, false);
        let moved = translate_map(&map, h, w, u, v, ShiftMode::Circular)?;
        let m0 = center_of_mass(&map, &grid);
        let m1 = center_of_mass(&moved, &grid);
        report.com_shift = report.com_shift.max(dev((m1.0 - m0.0, m1.1 - m0.1), (u as f64 * dx, v as f64 * dy)));

        let logits = interior_map(&mut rng, h, w, margin, -50.0, true);
        let moved = translate_map(&logits, h, w, u, v, ShiftMode::Circular)?;
        let s0 = soft_argmax_map(&logits, h, w, &grid)?;
        let s1 = soft_argmax_map(&moved, h, w, &grid)?;
        report.soft_argmax_shift = report
            .soft_argmax_shift
            .max(dev((s1.0 - s0.0, s1.1 - s0.1), (u as f64 * dx, v as f64 * dy)));

        let other = interior_map(&mut rng, h, w, margin, -50.0, true);
        let b: f64 = rng.gen_range(0.2..0.8);
        let blend: Vec<f64> = logits.iter().zip(&other).map(|(p, q)| b * p + (1.0 - b) * q).collect();
        let so = soft_argmax_map(&other, h, w, &grid)?;
        let sb = soft_argmax_map(&blend, h, w, &grid)?;
        let gap = dev(sb, (b * s0.0 + (1.0 - b) * so.0, b * s0.1 + (1.0 - b) * so.1));
        report.soft_argmax_nonaffinity = report.soft_argmax_nonaffinity.max(gap);
    }
    Ok(report)
}
