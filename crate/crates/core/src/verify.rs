//! Self-checks run by `ast verify`: finite-difference gradients, the
//! localization equivariance suite, compositing invariants, loss closed
//! forms and metric invariants.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{gradient_check, gradient_check_training, parameter_check, GradCheckReport};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{ModelConfig, Profile, RunConfig};
use crate::encoder::{split_latents, Dropout, SlotTriplets};
use crate::error::Result;
use crate::localization::{aggregate_features, check_proposition1, normalize_attention, soft_argmax, CoordinateGrid};
use crate::losses::{pixel_entropy_loss, reconstruction_loss, total_loss, warmup_factor};
use crate::metrics::{ari_fg, miou, msc_fg};
use crate::model::Model;
use crate::nn::NormKind;
use crate::params::seeded_rng;
use crate::renderer::{composite, place_layer};

pub const GRAD_RTOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
    /// Largest error seen, in the suite's own measure.
    pub worst: f64,
    pub seconds: f64,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: 0,
            failures: Vec::new(),
            worst: 0.0,
            seconds: 0.0,
        }
    }

    fn check(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if err.is_nan() {
            self.worst = f64::NAN;
        } else {
            self.worst = self.worst.max(err);
        }
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn checks(&self) -> usize {
        self.suites.iter().map(|s| s.checks).sum()
    }

    pub fn failures(&self) -> usize {
        self.suites.iter().map(|s| s.failures.len()).sum()
    }
}

fn timed(name: &'static str, body: impl FnOnce(&mut SuiteReport) -> Result<()>) -> Result<SuiteReport> {
    let t = Instant::now();
    let mut r = SuiteReport::new(name);
    body(&mut r)?;
    r.seconds = t.elapsed().as_secs_f64();
    Ok(r)
}

pub fn run_all(seed: u64) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            gradient_suite(5, seed)?,
            center_of_mass_suite(100, seed)?,
            compositing_suite(1000, seed)?,
            loss_suite()?,
            metric_suite(200, seed)?,
        ],
    })
}

// ---------------------------------------------------------------- gradients

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// Values in `[-1, -gap] u [gap, 1]`, away from a kink at zero.
fn away(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Sampling grid whose pixel coordinates stay clear of integer lattice
/// lines, where bilinear interpolation is not differentiable.
fn smooth_grid(rng: &mut ChaCha8Rng, n: usize, ho: usize, wo: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * ho * wo * 2);
    for _ in 0..n * ho * wo {
        for size in [w, h] {
            let cell = rng.gen_range(-1..size as i64) as f64;
            let px = cell + rng.gen_range(0.15..0.85);
            data.push(2.0 * px / (size - 1) as f64 - 1.0);
        }
    }
    Tensor::new(&[n, ho, wo, 2], data).expect("shape and data agree")
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
type MakeFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

struct Case {
    name: &'static str,
    make: MakeFn,
    op: OpFn,
    step: f64,
    training: bool,
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        make: Box::new(make),
        op: Box::new(op),
        step: 1e-5,
        training: false,
    }
}

fn op_cases() -> Vec<Case> {
    let mut cases = vec![
        case("add", |r| vec![signed(r, &[3, 4]), signed(r, &[1, 4])], |g, v| g.add(v[0], v[1])),
        case("sub", |r| vec![signed(r, &[2, 3, 4]), signed(r, &[3, 1])], |g, v| g.sub(v[0], v[1])),
        case("mul", |r| vec![signed(r, &[3, 4]), signed(r, &[3, 1])], |g, v| g.mul(v[0], v[1])),
        case(
            "div",
            |r| vec![signed(r, &[3, 4]), uniform(r, &[3, 4], 0.5, 2.0)],
            |g, v| g.div(v[0], v[1]),
        ),
        case("neg", |r| vec![signed(r, &[5])], |g, v| Ok(g.neg(v[0]))),
        case("exp", |r| vec![signed(r, &[5])], |g, v| Ok(g.exp(v[0]))),
        case("log", |r| vec![uniform(r, &[5], 0.2, 3.0)], |g, v| Ok(g.log(v[0]))),
        case("sigmoid", |r| vec![uniform(r, &[6], -4.0, 4.0)], |g, v| Ok(g.sigmoid(v[0]))),
        case("relu", |r| vec![away(r, &[6], 0.05)], |g, v| Ok(g.relu(v[0]))),
        case("celu", |r| vec![uniform(r, &[6], -3.0, 3.0)], |g, v| Ok(g.celu(v[0]))),
        case("abs", |r| vec![away(r, &[6], 0.05)], |g, v| Ok(g.abs(v[0]))),
        case("square", |r| vec![signed(r, &[5])], |g, v| Ok(g.square(v[0]))),
        case("sqrt", |r| vec![uniform(r, &[5], 0.2, 3.0)], |g, v| Ok(g.sqrt(v[0]))),
        case(
            "clamp",
            |r| vec![signed(r, &[8]).map(|x| if (x.abs() - 0.5).abs() < 0.05 { x * 0.8 } else { x })],
            |g, v| Ok(g.clamp(v[0], -0.5, 0.5)),
        ),
        case("mul_scalar", |r| vec![signed(r, &[4])], |g, v| Ok(g.mul_scalar(v[0], -1.7))),
        case("add_scalar", |r| vec![signed(r, &[4])], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        case(
            "dropout",
            |r| vec![signed(r, &[8]), uniform(r, &[8], 0.0, 1.0)],
            |g, v| {
                let u = g.value(v[1]).data().to_vec();
                g.dropout(v[0], 0.3, &u)
            },
        ),
        case("sum", |r| vec![signed(r, &[2, 3])], |g, v| Ok(g.sum(v[0]))),
        case("mean", |r| vec![signed(r, &[2, 3])], |g, v| Ok(g.mean(v[0]))),
        case("sum_axes", |r| vec![signed(r, &[2, 3, 4])], |g, v| g.sum_axes(v[0], &[0, 2], true)),
        case("mean_axes", |r| vec![signed(r, &[2, 3, 4])], |g, v| g.mean_axes(v[0], &[1], false)),
        case("reshape", |r| vec![signed(r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", |r| vec![signed(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose_last", |r| vec![signed(r, &[2, 3, 4])], |g, v| g.transpose_last(v[0])),
        case(
            "concat",
            |r| vec![signed(r, &[2, 3]), signed(r, &[2, 2])],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case("slice", |r| vec![signed(r, &[3, 5])], |g, v| g.slice(v[0], 1, 1, 3)),
        case(
            "split",
            |r| vec![signed(r, &[2, 5])],
            |g, v| {
                let parts = g.split(v[0], 1, &[2, 3])?;
                let a = g.mul_scalar(parts[0], 2.0);
                g.concat(&[parts[1], a], 1)
            },
        ),
        case("broadcast_to", |r| vec![signed(r, &[1, 4])], |g, v| g.broadcast_to(v[0], &[3, 4])),
        case(
            "matmul",
            |r| vec![signed(r, &[2, 3, 4]), signed(r, &[2, 4, 5])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "matmul_shared",
            |r| vec![signed(r, &[2, 3, 4]), signed(r, &[4, 5])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case("softmax", |r| vec![uniform(r, &[3, 5], -2.0, 2.0)], |g, v| g.softmax(v[0])),
        case(
            "attention",
            |r| vec![signed(r, &[2, 3, 4]), signed(r, &[2, 3, 4]), signed(r, &[2, 3, 4])],
            |g, v| {
                let kt = g.transpose_last(v[1])?;
                let s = g.matmul(v[0], kt)?;
                let s = g.mul_scalar(s, 0.5);
                let a = g.softmax(s)?;
                g.matmul(a, v[2])
            },
        ),
        case(
            "conv2d",
            |r| vec![signed(r, &[2, 3, 5, 5]), signed(r, &[4, 3, 3, 3]), signed(r, &[4])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d_stride2",
            |r| vec![signed(r, &[1, 2, 6, 6]), signed(r, &[3, 2, 4, 4])],
            |g, v| g.conv2d(v[0], v[1], None, 2, 1),
        ),
        case(
            "conv_transpose2d",
            |r| vec![signed(r, &[1, 3, 3, 3]), signed(r, &[3, 2, 4, 4]), signed(r, &[2])],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        case(
            "conv_transpose2d_k2",
            |r| vec![signed(r, &[2, 2, 2, 3]), signed(r, &[2, 3, 2, 2])],
            |g, v| g.conv_transpose2d(v[0], v[1], None, 2, 0),
        ),
        case(
            "group_norm",
            |r| vec![signed(r, &[2, 4, 3, 3]), uniform(r, &[4], 0.5, 1.5), signed(r, &[4])],
            |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5),
        ),
        case(
            "layer_norm",
            |r| vec![signed(r, &[3, 5]), uniform(r, &[5], 0.5, 1.5), signed(r, &[5])],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(
            "batch_norm_eval",
            |r| vec![signed(r, &[2, 2, 2, 2]), uniform(r, &[2], 0.5, 1.5), signed(r, &[2])],
            |g, v| {
                let rm = g.constant(Tensor::from_f64(&[2], &[0.1, -0.2])?);
                let rv = g.constant(Tensor::from_f64(&[2], &[0.8, 1.3])?);
                g.batch_norm(v[0], v[1], v[2], rm, rv, 0.1, 1e-5)
            },
        ),
        case(
            "grid_sample",
            |r| vec![signed(r, &[2, 2, 4, 5]), smooth_grid(r, 2, 3, 3, 4, 5)],
            |g, v| g.grid_sample(v[0], v[1]),
        ),
        case(
            "normalize_attention",
            |r| vec![uniform(r, &[2, 2, 3, 4], -2.0, 2.0)],
            |g, v| normalize_attention(g, v[0]),
        ),
        case(
            "soft_argmax",
            |r| vec![uniform(r, &[2, 2, 3, 4], -2.0, 2.0)],
            |g, v| {
                let a = normalize_attention(g, v[0])?;
                soft_argmax(g, a, &CoordinateGrid::new(3, 4))
            },
        ),
        case(
            "aggregate_features",
            |r| vec![uniform(r, &[1, 2, 3, 3], -2.0, 2.0), signed(r, &[1, 4, 3, 3])],
            |g, v| {
                let a = normalize_attention(g, v[0])?;
                aggregate_features(g, a, v[1])
            },
        ),
        case(
            "split_latents",
            |r| vec![uniform(r, &[1, 2, 2 + 1 + 1 + 3], -0.9, 0.9)],
            |g, v| {
                let mut cfg = RunConfig::profile(Profile::Desk).model.encoder;
                cfg.z_what_dim = 3;
                let l = split_latents(g, SlotTriplets(v[0]), &cfg)?;
                let a = g.reshape(l.alpha, &[1, 2, 1])?;
                g.concat(&[l.position, l.scale, a, l.z_what], 2)
            },
        ),
        case(
            "composite",
            |r| {
                vec![
                    uniform(r, &[1, 3, 3, 2, 2], 0.0, 1.0),
                    uniform(r, &[1, 3, 1, 2, 2], 0.1, 1.0),
                    uniform(r, &[1, 3], 0.2, 3.0),
                ]
            },
            |g, v| {
                let (w, img) = composite(g, v[0], v[1], v[2])?;
                let w = g.reshape(w, &[1, 12])?;
                let img = g.reshape(img, &[1, 12])?;
                g.concat(&[w, img], 1)
            },
        ),
        case(
            "reconstruction_loss",
            |r| {
                let x = uniform(r, &[2, 3, 3, 3], 0.2, 0.8);
                let d = away(r, &[2, 3, 3, 3], 0.02).map(|v| v * 0.2);
                let y = Tensor::new(
                    x.shape(),
                    x.data().iter().zip(d.data()).map(|(a, b)| a + b).collect(),
                )
                .expect("same shape");
                vec![x, y]
            },
            |g, v| reconstruction_loss(g, v[0], v[1]),
        ),
        case(
            "pixel_entropy_loss",
            |r| vec![uniform(r, &[2, 3, 1, 2, 2], -2.0, 2.0)],
            |g, v| {
                let x = g.permute(v[0], &[0, 2, 3, 4, 1])?;
                let w = g.softmax(x)?;
                let w = g.permute(w, &[0, 4, 1, 2, 3])?;
                pixel_entropy_loss(g, w)
            },
        ),
        case(
            "total_loss",
            |r| {
                vec![
                    uniform(r, &[1, 3, 2, 2], 0.0, 1.0),
                    uniform(r, &[1, 3, 2, 2], 0.0, 1.0),
                    uniform(r, &[1, 2, 1, 2, 2], 0.1, 1.0),
                ]
            },
            |g, v| {
                let s = g.sum_axes(v[2], &[1], true)?;
                let w = g.div(v[2], s)?;
                Ok(total_loss(g, v[0], v[1], w, 3, 0.5, 10)?.0)
            },
        ),
    ];
    let mut place = case(
        "place_layer",
        |r| {
            vec![
                signed(r, &[2, 4, 4, 4]),
                uniform(r, &[2, 2], -0.6, 0.6),
                uniform(r, &[2, 1], 1.3, 2.5),
            ]
        },
        |g, v| place_layer(g, v[0], v[1], v[2], 6, 6),
    );
    place.step = 1e-6;
    cases.push(place);
    let mut bn = case(
        "batch_norm",
        |r| vec![signed(r, &[3, 2, 2, 2]), uniform(r, &[2], 0.5, 1.5), signed(r, &[2])],
        |g, v| {
            let rm = g.constant(Tensor::zeros(&[2]));
            let rv = g.constant(Tensor::ones(&[2]));
            g.batch_norm(v[0], v[1], v[2], rm, rv, 0.1, 1e-5)
        },
    );
    bn.training = true;
    cases.push(bn);
    for c in cases.iter_mut().filter(|c| c.name == "grid_sample") {
        c.step = 1e-6;
    }
    cases
}

/// A model small enough for finite differences over its parameters.
pub fn mini_config(norm: NormKind) -> ModelConfig {
    let mut m = RunConfig::profile(Profile::Desk).model;
    m.image_size = 16;
    m.slots = 2;
    m.feature_generator.widths = vec![4, 8, 8];
    m.feature_generator.norm = norm;
    m.encoder.d_t = 8;
    m.encoder.heads = 2;
    m.encoder.ff_dim = 8;
    m.encoder.layers = 1;
    m.encoder.z_what_dim = 4;
    m.background.latent_dim = 4;
    m.background.widths = vec![4, 4];
    m.alpha0_log_init = 0.0;
    m
}

fn record(r: &mut SuiteReport, rep: GradCheckReport, instance: usize) {
    let err = rep.max_rel_error();
    let ok = rep.passed();
    r.check(ok, err, || {
        format!("{} instance {instance}: max relative error {err:.3e}", rep.op)
    });
}

/// Every differentiable operation on `instances` random inputs, plus the
/// parameter gradients of miniature model components.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    timed("gradients", |r| {
        for (ci, c) in op_cases().iter().enumerate() {
            for i in 0..instances {
                let mut rng = seeded_rng(seed.wrapping_add(i as u64), 100 + ci as u64);
                let inputs = (c.make)(&mut rng);
                let rep = if c.training {
                    gradient_check_training(c.name, &inputs, c.step, GRAD_RTOL, &c.op)?
                } else {
                    gradient_check(c.name, &inputs, c.step, GRAD_RTOL, &c.op)?
                };
                record(r, rep, i);
            }
        }
        module_checks(r, instances, seed)
    })
}

fn module_checks(r: &mut SuiteReport, instances: usize, seed: u64) -> Result<()> {
    const PER_TENSOR: usize = 3;
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        for (tag, norm, training) in [("group", NormKind::Group, false), ("batch", NormKind::Batch, true)] {
            let cfg = mini_config(norm);
            let model = Model::new(&cfg, s)?;
            let mut rng = seeded_rng(s, 200);
            let image = uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
            let z = signed(&mut rng, &[2, 2, 4]);

            let img = image.clone();
            let name: &'static str = if tag == "group" {
                "feature_generator"
            } else {
                "feature_generator_batch_norm"
            };
            let rep = parameter_check(name, &model.params, |n| n.starts_with("fg."), PER_TENSOR, s, 1e-5, GRAD_RTOL, training, |g, p| {
                let x = g.constant(img.clone());
                let m = model.generator.forward(g, p, x)?;
                let f = g.reshape(m.features, &[2, 1, 4 * 4 * cfg.encoder.d_phi()])?;
                let l = g.reshape(m.logits, &[2, 1, 4 * 4 * 2])?;
                g.concat(&[f, l], 2)
            })?;
            record(r, rep, i);
            if training {
                continue;
            }

            let img = image.clone();
            let rep = parameter_check("object_encoder", &model.params, |n| n.starts_with("enc."), PER_TENSOR, s, 1e-5, GRAD_RTOL, false, |g, p| {
                let x = g.constant(img.clone());
                let m = model.generator.forward(g, p, x)?;
                let l = model.encoder.encode(g, p, &m, &mut Dropout::off())?;
                let a = g.reshape(l.alpha, &[2, 2, 1])?;
                g.concat(&[l.position, l.scale, a, l.z_what], 2)
            })?;
            record(r, rep, i);

            let zz = z.clone();
            let rep = parameter_check("glimpse_generator", &model.params, |n| n.starts_with("glimpse."), PER_TENSOR, s, 1e-5, GRAD_RTOL, false, |g, p| {
                let z = g.constant(zz.clone());
                model.glimpses.forward(g, p, z)
            })?;
            record(r, rep, i);

            let img = image.clone();
            let rep = parameter_check("background_autoencoder", &model.params, |n| n.starts_with("bg."), PER_TENSOR, s, 1e-5, GRAD_RTOL, false, |g, p| {
                let x = g.constant(img.clone());
                model.background(g, p, x)
            })?;
            record(r, rep, i);

            let img = image.clone();
            let rep = parameter_check("model_total_loss", &model.params, |_| true, 2, s, 1e-5, GRAD_RTOL, false, |g, p| {
                let x = g.constant(img.clone());
                let f = model.forward(g, p, x, None, &mut Dropout::off())?;
                Ok(total_loss(g, f.scene.reconstruction, x, f.scene.weights, 5, 0.5, 10)?.0)
            })?;
            record(r, rep, i);
        }
    }
    Ok(())
}

// ------------------------------------------------------------- localization

pub fn center_of_mass_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    timed("center-of-mass", |r| {
        let rep = check_proposition1(trials, &[(8, 8), (12, 16), (16, 10)], seed)?;
        for (what, err, tol) in [
            ("center-of-mass affinity", rep.affinity, 1e-12),
            ("Dirac shift equivariance", rep.dirac_shift, 1e-12),
            ("center-of-mass shift equivariance", rep.com_shift, 1e-12),
            ("soft-argmax circular shift equivariance", rep.soft_argmax_shift, 1e-6),
        ] {
            r.check(err < tol, err, || format!("{what}: deviation {err:.3e} >= {tol:e}"));
        }
        let gap = rep.soft_argmax_nonaffinity;
        r.check(gap > 1e-6, 0.0, || {
            format!("soft-argmax looked affine in its logits (gap {gap:.3e})")
        });
        Ok(())
    })
}

// ---------------------------------------------------------------- rendering

/// Random decompositions in 32-bit: weights sum to one, scale-free in the
/// activations, and the composite stays inside the range of its layers.
pub fn compositing_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    timed("compositing", |r| {
        let mut rng = seeded_rng(seed, 300);
        let (mut sum_err, mut hom_err, mut hull_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..cases {
            let k1 = rng.gen_range(2..=6);
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let layers: Vec<f64> = (0..k1 * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut masks: Vec<f64> = (0..k1 * h * w)
                .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) })
                .collect();
            masks[..h * w].iter_mut().for_each(|m| *m = 1.0);
            let alpha: Vec<f64> = (0..k1).map(|_| rng.gen_range(-6.0f64..11.0).exp()).collect();
            let c: f64 = rng.gen_range(0.01..100.0);
            let scaled: Vec<f64> = alpha.iter().map(|a| a * c).collect();

            let run = |alpha: &[f64]| -> Result<(Vec<f32>, Vec<f32>)> {
                let mut g = Graph::<f32>::new();
                let l = g.constant(Tensor::from_f64(&[1, k1, 3, h, w], &layers)?);
                let m = g.constant(Tensor::from_f64(&[1, k1, 1, h, w], &masks)?);
                let a = g.constant(Tensor::from_f64(&[1, k1], alpha)?);
                let (wv, img) = composite(&mut g, l, m, a)?;
                Ok((g.value(wv).data().to_vec(), g.value(img).data().to_vec()))
            };
            let (wts, img) = run(&alpha)?;
            let (wts2, _) = run(&scaled)?;
            let plane = h * w;
            for p in 0..plane {
                let s: f64 = (0..k1).map(|k| f64::from(wts[k * plane + p])).sum();
                sum_err = sum_err.max((s - 1.0).abs());
                for ch in 0..3 {
                    let vals = (0..k1).map(|k| layers[(k * 3 + ch) * plane + p]);
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    let x = f64::from(img[ch * plane + p]);
                    hull_err = hull_err.max(lo - x).max(x - hi);
                }
            }
            for (a, b) in wts.iter().zip(&wts2) {
                hom_err = hom_err.max(f64::from((a - b).abs()));
            }
        }
        r.check(sum_err < 1e-5, sum_err, || format!("weight sums deviate from 1 by {sum_err:.3e}"));
        r.check(hom_err < 1e-6, hom_err, || {
            format!("weights change by {hom_err:.3e} under activation scaling")
        });
        r.check(hull_err <= 1e-6, hull_err.max(0.0), || {
            format!("composite leaves the layer range by {hull_err:.3e}")
        });
        Ok(())
    })
}

// ------------------------------------------------------------------- losses

fn scalar_loss(shape: &[usize], data: &[f64], f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(shape, data)?);
    let l = f(&mut g, x)?;
    Ok(g.value(l).item())
}

pub fn loss_suite() -> Result<SuiteReport> {
    timed("losses", |r| {
        let (k1, h, w) = (4, 3, 5);
        let plane = h * w;
        let mut one_hot = vec![0.0; k1 * plane];
        for p in 0..plane {
            one_hot[(p % k1) * plane + p] = 1.0;
        }
        let v = scalar_loss(&[1, k1, 1, h, w], &one_hot, |g, x| pixel_entropy_loss(g, x))?;
        r.check(v < 1e-30, v, || format!("one-hot entropy loss {v:e}"));

        for (k, expect) in [(2usize, 2f64.ln().powi(2)), (4, 4f64.ln().powi(2))] {
            let u = vec![1.0 / k as f64; k * plane];
            let v = scalar_loss(&[1, k, 1, h, w], &u, |g, x| pixel_entropy_loss(g, x))?;
            let err = (v - expect).abs();
            r.check(err < 1e-6, err, || format!("uniform-over-{k} entropy loss {v} expected {expect}"));
        }

        let n = 800;
        for (step, expect) in [(0, 0.0), (n / 2, 0.25), (n, 1.0), (3 * n, 1.0)] {
            let f = warmup_factor(step, n);
            r.check(f == expect, (f - expect).abs(), || format!("warmup factor at step {step} is {f}"));
        }

        let x: Vec<f64> = (0..3 * plane).map(|i| (i % 7) as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 3, h, w], &x)?);
        let b = g.constant(Tensor::from_f64(&[1, 3, h, w], &y)?);
        let rec = reconstruction_loss(&mut g, a, b)?;
        let v = g.value(rec).item();
        let err = (v - 0.09).abs();
        r.check(err < 1e-12, err, || format!("constant 0.1 offset gives reconstruction loss {v}"));

        let wts: Vec<f64> = (0..2 * plane).map(|i| if i < plane { 0.7 } else { 0.3 }).collect();
        let wv = g.constant(Tensor::from_f64(&[1, 2, 1, h, w], &wts)?);
        let (_, parts) = total_loss(&mut g, a, b, wv, 300, 1e-2, 800)?;
        let composed = parts.rec + parts.warmup_factor * 1e-2 * parts.pixel;
        let err = (parts.total - composed).abs();
        r.check(err == 0.0, err, || format!("total {} differs from its parts {composed}", parts.total));
        Ok(())
    })
}

// ------------------------------------------------------------------ metrics

fn random_labels(rng: &mut ChaCha8Rng, n: usize, max: u8) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..=max)).collect()
}

/// Relabelling invariance, value ranges and perfect-prediction values.
pub fn metric_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    timed("metrics", |r| {
        let mut rng = seeded_rng(seed, 400);
        for _ in 0..cases {
            let gt = random_labels(&mut rng, 64, 3);
            let pred = random_labels(&mut rng, 64, 4);
            let mut perm: Vec<u8> = (0..=255).collect();
            perm[..5].rotate_left(rng.gen_range(1..5));
            let relabeled: Vec<u8> = pred.iter().map(|&l| perm[l as usize]).collect();

            let m = miou(&pred, &gt)?;
            let m2 = miou(&relabeled, &gt)?;
            r.check((0.0..=1.0).contains(&m), 0.0, || format!("miou {m} outside [0, 1]"));
            r.check(m == m2, (m - m2).abs(), || format!("miou changed under relabelling: {m} vs {m2}"));
            r.check(miou(&gt, &gt)? == 1.0, 0.0, || "miou of a perfect prediction is not 1".into());

            if gt.iter().any(|&l| l != 0) {
                let a = ari_fg(&pred, &gt)?;
                let a2 = ari_fg(&relabeled, &gt)?;
                r.check((-1.0..=1.0).contains(&a), 0.0, || format!("ari_fg {a} outside [-1, 1]"));
                r.check((a - a2).abs() < 1e-12, (a - a2).abs(), || format!("ari_fg changed under relabelling: {a} vs {a2}"));
                r.check(ari_fg(&gt, &gt)? == 1.0, 0.0, || "ari_fg of a perfect prediction is not 1".into());
                let s = msc_fg(&pred, &gt)?;
                let s2 = msc_fg(&relabeled, &gt)?;
                r.check((0.0..=1.0).contains(&s), 0.0, || format!("msc_fg {s} outside [0, 1]"));
                r.check(s == s2, (s - s2).abs(), || format!("msc_fg changed under relabelling: {s} vs {s2}"));
            }
        }
        Ok(())
    })
}
