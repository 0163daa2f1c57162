//! Library operations compared against direct loop implementations.

mod common;

use ast_core::encoder::MultiHeadAttention;
use ast_core::metrics;
use ast_core::params::{seeded_rng, Init, ParamStore};
use ast_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = seeded_rng(7, 0);
    for &(k, d, heads) in &[(3, 4, 1), (5, 8, 2), (4, 12, 3), (1, 6, 2)] {
        let mut store = ParamStore::new();
        let mut init_rng = seeded_rng(11, k as u64);
        let attn = {
            let mut init = Init::new(&mut store, &mut init_rng, "t");
            MultiHeadAttention::new(&mut init, "attn", d, heads).unwrap()
        };
        let b = 2;
        let x = random(b * k * d, &mut rng);
        let mut g = Graph::<f64>::new();
        let bound = store.bind(&mut g, |_| false);
        let xv = g.constant(Tensor::new(&[b, k, d], x.clone()).unwrap());
        let y = attn.forward(&mut g, &bound, xv).unwrap();
        let got = g.value(y).data().to_vec();

        let val = |id| store.get(id).value.data();
        let p = common::AttentionWeights {
            wq: val(attn.query.weight),
            bq: val(attn.query.bias),
            wk: val(attn.key.weight),
            bk: val(attn.key.bias),
            wv: val(attn.value.weight),
            bv: val(attn.value.bias),
            wo: val(attn.out.weight),
            bo: val(attn.out.bias),
        };
        for n in 0..b {
            let want = common::attention_loops(&x[n * k * d..(n + 1) * k * d], k, d, heads, &p);
            let diff = max_abs_diff(&got[n * k * d..(n + 1) * k * d], &want);
            assert!(diff < 1e-12, "k={k} d={d} heads={heads}: {diff}");
        }
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (k, d, heads) = (4, 8, 2);
    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(3, 0);
    let attn = {
        let mut init = Init::new(&mut store, &mut init_rng, "t");
        MultiHeadAttention::new(&mut init, "attn", d, heads).unwrap()
    };
    let mut rng = seeded_rng(5, 0);
    let x = random(k * d, &mut rng);
    let perm = [2, 0, 3, 1];
    let xp: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
    let run = |input: Vec<f64>| {
        let mut g = Graph::<f64>::new();
        let bound = store.bind(&mut g, |_| false);
        let xv = g.constant(Tensor::new(&[1, k, d], input).unwrap());
        let y = attn.forward(&mut g, &bound, xv).unwrap();
        g.value(y).data().to_vec()
    };
    let y = run(x);
    let yp = run(xp);
    for (row, &i) in perm.iter().enumerate() {
        assert!(max_abs_diff(&yp[row * d..(row + 1) * d], &y[i * d..(i + 1) * d]) < 1e-12);
    }
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = seeded_rng(1, 1);
    for &(b, c, h, w, o, kk, stride, pad) in &[
        (1, 1, 5, 5, 1, 3, 1, 1),
        (2, 3, 7, 6, 4, 3, 2, 1),
        (1, 2, 8, 8, 3, 4, 2, 1),
        (2, 2, 4, 5, 2, 1, 1, 0),
        (1, 3, 9, 7, 2, 5, 3, 2),
    ] {
        let x = random(b * c * h * w, &mut rng);
        let k = random(o * c * kk * kk, &mut rng);
        let bias = random(o, &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(&[b, c, h, w], x.clone()).unwrap());
        let kv = g.constant(Tensor::new(&[o, c, kk, kk], k.clone()).unwrap());
        let bv = g.constant(Tensor::new(&[o], bias.clone()).unwrap());
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let (want, shape) = common::conv2d_loops(&x, [b, c, h, w], &k, [o, c, kk, kk], Some(&bias), stride, pad);
        assert_eq!(g.shape(y), shape.as_slice());
        assert!(max_abs_diff(g.value(y).data(), &want) < 1e-12);
    }
}

#[test]
fn conv_transpose2d_matches_scatter_oracle() {
    let mut rng = seeded_rng(1, 2);
    for &(b, c, h, w, o, kk, stride, pad) in &[
        (1, 1, 3, 3, 1, 3, 1, 1),
        (2, 3, 4, 5, 2, 4, 2, 1),
        (1, 2, 2, 2, 3, 3, 2, 0),
        (1, 4, 5, 3, 2, 5, 3, 2),
    ] {
        let x = random(b * c * h * w, &mut rng);
        let k = random(c * o * kk * kk, &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(&[b, c, h, w], x.clone()).unwrap());
        let kv = g.constant(Tensor::new(&[c, o, kk, kk], k.clone()).unwrap());
        let y = g.conv_transpose2d(xv, kv, None, stride, pad).unwrap();
        let (want, shape) = common::conv_transpose2d_loops(&x, [b, c, h, w], &k, [c, o, kk, kk], stride, pad);
        assert_eq!(g.shape(y), shape.as_slice());
        assert!(max_abs_diff(g.value(y).data(), &want) < 1e-12);
    }
}

#[test]
fn grid_sample_matches_loop_oracle() {
    let mut rng = seeded_rng(1, 3);
    let (n, c, h, w, ho, wo) = (2, 3, 6, 5, 4, 7);
    let src = random(n * c * h * w, &mut rng);
    let grid: Vec<f64> = (0..n * ho * wo * 2).map(|_| rng.gen_range(-1.6..1.6)).collect();
    let mut g = Graph::<f64>::new();
    let sv = g.constant(Tensor::new(&[n, c, h, w], src.clone()).unwrap());
    let gv = g.constant(Tensor::new(&[n, ho, wo, 2], grid.clone()).unwrap());
    let y = g.grid_sample(sv, gv).unwrap();
    let want = common::grid_sample_loops(&src, [n, c, h, w], &grid, ho, wo);
    assert!(max_abs_diff(g.value(y).data(), &want) < 1e-12);
}

#[test]
fn grid_sample_reproduces_source_on_pixel_centers() {
    let (h, w) = (4, 6);
    let src: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
    let mut grid = Vec::new();
    for y in 0..h {
        for x in 0..w {
            grid.push(-1.0 + 2.0 * x as f64 / (w - 1) as f64);
            grid.push(-1.0 + 2.0 * y as f64 / (h - 1) as f64);
        }
    }
    let mut g = Graph::<f64>::new();
    let sv = g.constant(Tensor::new(&[1, 1, h, w], src.clone()).unwrap());
    let gv = g.constant(Tensor::new(&[1, h, w, 2], grid).unwrap());
    let y = g.grid_sample(sv, gv).unwrap();
    assert!(max_abs_diff(g.value(y).data(), &src) < 1e-12);
}

fn label_maps(len: usize, labels: u8) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (
        prop::collection::vec(0..labels, len),
        prop::collection::vec(0..labels, len),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn miou_matches_exhaustive_matching((pred, gt) in label_maps(36, 5)) {
        let got = metrics::miou(&pred, &gt).unwrap();
        let want = common::miou_exhaustive(&pred, &gt);
        prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ari_matches_pair_counting((pred, gt) in label_maps(40, 4)) {
        match metrics::ari_fg(&pred, &gt) {
            Ok(got) => {
                let want = common::ari_pair_counting(&pred, &gt);
                prop_assert_eq!(got, want);
            }
            Err(_) => prop_assert!(gt.iter().all(|&g| g == 0)),
        }
    }

    #[test]
    fn msc_matches_direct((pred, gt) in label_maps(30, 4)) {
        prop_assume!(gt.iter().any(|&g| g != 0));
        let got = metrics::msc_fg(&pred, &gt).unwrap();
        let want = common::msc_direct(&pred, &gt);
        prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn mse_matches_loops(a in prop::collection::vec(0.0f64..1.0, 48), b in prop::collection::vec(0.0f64..1.0, 48)) {
        let got = metrics::mse(&a, &b).unwrap();
        let want = common::mse_loops(&a, &b, 3, 4, 4);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn metrics_ignore_label_names((pred, gt) in label_maps(25, 4), shift in 1u8..200) {
        prop_assume!(gt.iter().any(|&g| g != 0));
        let renamed: Vec<u8> = pred.iter().map(|&p| p.wrapping_add(shift)).collect();
        prop_assert!((metrics::miou(&pred, &gt).unwrap() - metrics::miou(&renamed, &gt).unwrap()).abs() < 1e-12);
        prop_assert_eq!(metrics::ari_fg(&pred, &gt).unwrap(), metrics::ari_fg(&renamed, &gt).unwrap());
        prop_assert!((metrics::msc_fg(&pred, &gt).unwrap() - metrics::msc_fg(&renamed, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_range((pred, gt) in label_maps(25, 5)) {
        let m = metrics::miou(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        if gt.iter().any(|&g| g != 0) {
            let a = metrics::ari_fg(&pred, &gt).unwrap();
            prop_assert!(a <= 1.0 + 1e-12 && a >= -1.0 - 1e-12);
            let s = metrics::msc_fg(&pred, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let gt: Vec<u8> = (0..64).map(|i| ((i / 8) % 3) as u8).collect();
    let pred: Vec<u8> = gt.iter().map(|&g| g * 7 + 1).collect();
    assert_eq!(metrics::miou(&pred, &gt).unwrap(), 1.0);
    assert_eq!(metrics::ari_fg(&pred, &gt).unwrap(), 1.0);
    assert_eq!(metrics::msc_fg(&pred, &gt).unwrap(), 1.0);
}
