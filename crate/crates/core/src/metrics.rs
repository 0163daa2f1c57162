//! Segmentation and reconstruction metrics.

use serde::Serialize;

use crate::error::{ensure, Error, Result};

/// Sorted distinct labels of a map.
fn labels_of(map: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    map.iter().for_each(|&l| seen[l as usize] = true);
    (0..=255u8).filter(|&l| seen[l as usize]).collect()
}

/// Contingency counts `table[i][j]` of the i-th present predicted label against
/// ground-truth label `cols[j]` over pixels where `keep` holds.
struct Contingency {
    cols: Vec<u8>,
    table: Vec<Vec<u64>>,
}

impl Contingency {
    fn new(pred: &[u8], gt: &[u8], keep: impl Fn(u8) -> bool) -> Self {
        let mut counts = vec![[0u64; 256]; 256];
        for (&p, &g) in pred.iter().zip(gt) {
            if keep(g) {
                counts[p as usize][g as usize] += 1;
            }
        }
        let rows: Vec<u8> = (0..=255u8)
            .filter(|&p| counts[p as usize].iter().any(|&c| c > 0))
            .collect();
        let cols: Vec<u8> = (0..=255u8)
            .filter(|&g| counts.iter().any(|r| r[g as usize] > 0))
            .collect();
        let table = rows
            .iter()
            .map(|&p| cols.iter().map(|&g| counts[p as usize][g as usize]).collect())
            .collect();
        Self { cols, table }
    }
}

fn same_shape(pred: &[u8], gt: &[u8], op: &'static str) -> Result<()> {
    ensure!(
        pred.len() == gt.len(),
        op,
        "prediction has {} pixels, ground truth {}",
        pred.len(),
        gt.len()
    );
    Ok(())
}

/// Intersection over union of every `(predicted, ground-truth)` segment pair.
fn iou_matrix(pred: &[u8], gt: &[u8]) -> (Vec<u8>, Vec<u8>, Vec<Vec<f64>>) {
    let pl = labels_of(pred);
    let gl = labels_of(gt);
    let mut area_p = [0u64; 256];
    let mut area_g = [0u64; 256];
    let mut inter = vec![[0u64; 256]; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        area_p[p as usize] += 1;
        area_g[g as usize] += 1;
        inter[p as usize][g as usize] += 1;
    }
    let m = pl
        .iter()
        .map(|&p| {
            gl.iter()
                .map(|&g| {
                    let i = inter[p as usize][g as usize];
                    let u = area_p[p as usize] + area_g[g as usize] - i;
                    if u == 0 {
                        0.0
                    } else {
                        i as f64 / u as f64
                    }
                })
                .collect()
        })
        .collect();
    (pl, gl, m)
}

/// Maximum-weight assignment of rows to columns of a rectangular matrix
/// (Hungarian algorithm on the negated weights). Returns the column chosen
/// for every row, or `None` for rows left unmatched when rows outnumber
/// columns.
pub fn max_weight_assignment(w: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -w[i][j]
        } else {
            0.0
        }
    };
    // Potentials formulation with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Mean over ground-truth segments (background included) of the IoU of
/// their matched predicted segment under the one-to-one matching that
/// maximizes total IoU; unmatched segments score 0.
pub fn miou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_shape(pred, gt, "miou")?;
    ensure!(!gt.is_empty(), "miou", "empty label maps");
    let (_, gl, m) = iou_matrix(pred, gt);
    // Rows are ground-truth segments.
    let by_gt: Vec<Vec<f64>> = (0..gl.len()).map(|j| m.iter().map(|row| row[j]).collect()).collect();
    let assign = max_weight_assignment(&by_gt);
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(j, a)| a.map_or(0.0, |i| by_gt[j][i]))
        .sum();
    Ok(total / gl.len() as f64)
}

fn choose2(n: u64) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index over ground-truth foreground pixels. Predicted
/// background is an ordinary cluster there. When both partitions are trivial
/// the index is defined as 1.
pub fn ari_fg(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_shape(pred, gt, "ari_fg")?;
    let c = Contingency::new(pred, gt, |g| g != 0);
    if c.cols.is_empty() {
        return Err(Error::UndefinedMetric("ground truth has no foreground pixels".into()));
    }
    let a: Vec<u64> = c.table.iter().map(|r| r.iter().sum()).collect();
    let b: Vec<u64> = (0..c.cols.len()).map(|j| c.table.iter().map(|r| r[j]).sum()).collect();
    let n: u64 = a.iter().sum();
    let index: f64 = c.table.iter().flatten().map(|&x| choose2(x)).sum();
    let sa: f64 = a.iter().map(|&x| choose2(x)).sum();
    let sb: f64 = b.iter().map(|&x| choose2(x)).sum();
    let expected = sa * sb / choose2(n).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sa + sb);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Size-weighted mean over ground-truth foreground regions of the best IoU
/// achieved by any predicted segment.
pub fn msc_fg(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_shape(pred, gt, "msc_fg")?;
    let (_, gl, m) = iou_matrix(pred, gt);
    let mut area = [0u64; 256];
    gt.iter().for_each(|&g| area[g as usize] += 1);
    let fg: Vec<usize> = (0..gl.len()).filter(|&j| gl[j] != 0).collect();
    if fg.is_empty() {
        return Err(Error::UndefinedMetric("ground truth has no foreground pixels".into()));
    }
    let total: u64 = fg.iter().map(|&j| area[gl[j] as usize]).sum();
    let covered: f64 = fg
        .iter()
        .map(|&j| {
            let best = m.iter().map(|row| row[j]).fold(0.0, f64::max);
            area[gl[j] as usize] as f64 * best
        })
        .sum();
    Ok(covered / total as f64)
}

/// Mean squared error on the 0-255 scale of images given in `[0, 1]`.
pub fn mse(recon: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(
        recon.len() == target.len() && !recon.is_empty(),
        "mse_metric",
        "images have {} and {} values",
        recon.len(),
        target.len()
    );
    let s: f64 = recon
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = (a - b) * 255.0;
            d * d
        })
        .sum();
    Ok(s / recon.len() as f64)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ImageMetrics {
    pub index: usize,
    pub miou: f64,
    pub ari_fg: Option<f64>,
    pub msc_fg: Option<f64>,
    pub mse: Option<f64>,
}

/// Dataset-level report; foreground metrics average over images that have
/// foreground.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub ari_fg: f64,
    pub msc_fg: f64,
    pub mse: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let mean = |xs: Vec<f64>| {
            if xs.is_empty() {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let miou = mean(per_image.iter().map(|m| m.miou).collect());
        let ari = mean(per_image.iter().filter_map(|m| m.ari_fg).collect());
        let msc = mean(per_image.iter().filter_map(|m| m.msc_fg).collect());
        let mses: Vec<f64> = per_image.iter().filter_map(|m| m.mse).collect();
        let mse = (!mses.is_empty()).then(|| mean(mses));
        Self {
            miou,
            ari_fg: ari,
            msc_fg: msc,
            mse,
            per_image,
        }
    }
}

/// Metrics of one image; `recon`/`target` are optional `[0, 1]` pixels.
pub fn image_metrics(index: usize, pred: &[u8], gt: &[u8], images: Option<(&[f64], &[f64])>) -> Result<ImageMetrics> {
    let undefined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(ImageMetrics {
        index,
        miou: miou(pred, gt)?,
        ari_fg: undefined(ari_fg(pred, gt))?,
        msc_fg: undefined(msc_fg(pred, gt))?,
        mse: images.map(|(r, t)| mse(r, t)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permuted_prediction_is_perfect() {
        let gt = [0, 0, 1, 1, 2, 2, 0, 1];
        let pred = [3, 3, 0, 0, 1, 1, 3, 0];
        assert_eq!(miou(&pred, &gt).unwrap(), 1.0);
        assert_eq!(ari_fg(&pred, &gt).unwrap(), 1.0);
        assert_eq!(msc_fg(&pred, &gt).unwrap(), 1.0);
    }

    #[test]
    fn all_background_against_half_object() {
        let gt = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        assert!((miou(&pred, &gt).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn half_covered_object() {
        let gt = [0, 0, 1, 1];
        let pred = [0, 0, 0, 2];
        assert!((msc_fg(&pred, &gt).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_foreground_is_undefined() {
        assert!(matches!(ari_fg(&[0, 1], &[0, 0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(msc_fg(&[0, 1], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mse_scale() {
        let a = vec![0.5; 12];
        let b = vec![0.4; 12];
        assert!((mse(&a, &b).unwrap() - 650.25).abs() < 1e-9);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn assignment_rectangular() {
        let w = vec![vec![0.1, 0.9], vec![0.8, 0.7], vec![0.0, 0.95]];
        let a = max_weight_assignment(&w);
        // Best: row1->col0 (0.8) + row2->col1 (0.95).
        assert_eq!(a, vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(miou(&[0, 1], &[0]).is_err());
    }
}
