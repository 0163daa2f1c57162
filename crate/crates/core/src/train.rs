//! Background pretraining, the three training scenarios, evaluation and
//! inference.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor};
use crate::checkpoint;
use crate::config::{Scenario, TrainConfig};
use crate::data::LabeledScene;
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{image_metrics, MetricsReport};
use crate::model::{is_background_param, Model};
use crate::optim::{clip_global_norm, lr_schedule, Adam, AdamConfig};
use crate::params::seeded_rng;
use crate::renderer::extract_segmentation;

pub const PHASE_BACKGROUND: u8 = 1;
pub const PHASE_FROZEN: u8 = 2;
pub const PHASE_JOINT: u8 = 3;

const STREAM_BATCHES: u64 = 10;
const STREAM_DROPOUT: u64 = 11;
const STREAM_BG_BATCHES: u64 = 12;
const EVAL_BATCH: usize = 16;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: u8,
    #[serde(rename = "L_rec")]
    pub l_rec: f64,
    #[serde(rename = "L_pixel")]
    pub l_pixel: f64,
    pub lr: f64,
    pub warmup_factor: f64,
    pub total: f64,
}

/// Dataset metrics at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub miou: f64,
    pub ari_fg: f64,
    pub msc_fg: f64,
    pub mse: Option<f64>,
}

impl EvalRecord {
    fn new(step: usize, r: &MetricsReport) -> Self {
        Self {
            step,
            miou: r.miou,
            ari_fg: r.ari_fg,
            msc_fg: r.msc_fg,
            mse: r.mse,
        }
    }
}

/// Where a run reports to. Everything is optional.
#[derive(Default)]
pub struct RunOutput<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub evals: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    /// Progress lines on stderr.
    pub progress: bool,
}

impl RunOutput<'_> {
    fn record(&mut self, r: &LogRecord) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut **w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        if self.progress {
            eprintln!(
                "step {:>6} phase {} L_rec {:.5} L_pixel {:.4} lr {:.2e}",
                r.step, r.phase, r.l_rec, r.l_pixel, r.lr
            );
        }
        Ok(())
    }

    fn record_eval(&mut self, r: &EvalRecord) -> Result<()> {
        if let Some(w) = self.evals.as_mut() {
            serde_json::to_writer(&mut **w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("evaluation log", e))?;
        }
        if self.progress {
            eprintln!(
                "eval step {:>6} mIoU {:.4} ARI-FG {:.4} MSC-FG {:.4} MSE {:.1}",
                r.step,
                r.miou,
                r.ari_fg,
                r.msc_fg,
                r.mse.unwrap_or(f64::NAN)
            );
        }
        Ok(())
    }

    fn checkpoint(&self, model: &Model, name: &str) -> Result<()> {
        match self.checkpoint_dir {
            Some(dir) => checkpoint::save(model, &dir.join(name)),
            None => Ok(()),
        }
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<LogRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Draws batches from a dataset in reshuffled epochs.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stack<T: Real>(planes: &[Vec<f64>], idx: &[usize], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(idx.len() * 3 * size * size);
    for &i in idx {
        data.extend(planes[i].iter().map(|&v| T::cast(v)));
    }
    Tensor::new(&[idx.len(), 3, size, size], data)
}

fn check_scenes(model: &Model, scenes: &[LabeledScene]) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let n = model.config.image_size;
    if let Some(s) = scenes.iter().find(|s| s.size != n) {
        return Err(Error::Config(format!("scene of size {} does not match model size {n}", s.size)));
    }
    Ok(())
}

fn adam(cfg: &TrainConfig, model: &Model) -> Adam {
    Adam::new(
        AdamConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
        &model.params,
    )
}

fn finite_grads(grads: &[Option<Vec<f64>>]) -> bool {
    grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
}

/// Phase 1: fits the background autoencoder alone with a mean absolute
/// error, at a constant learning rate.
pub fn pretrain_background<T: Real>(
    model: &mut Model,
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
    out: &mut RunOutput<'_>,
) -> Result<Vec<LogRecord>> {
    check_scenes(model, scenes)?;
    let size = model.config.image_size;
    let planes: Vec<Vec<f64>> = scenes.iter().map(LabeledScene::planar).collect();
    let mut batches = Batches::new(scenes.len(), seeded_rng(cfg.seed, STREAM_BG_BATCHES));
    let mut opt = adam(cfg, model);
    let mut log = Vec::new();
    for step in 1..=cfg.bg_pretrain_steps {
        let idx = batches.next(cfg.bg_batch_size);
        let mut g = Graph::<T>::training();
        let p = model.bind(&mut g, is_background_param);
        let x = g.constant(stack(&planes, &idx, size)?);
        let bg = model.background(&mut g, &p, x)?;
        let d = g.sub(bg, x)?;
        let d = g.abs(d);
        let loss = g.mean(d);
        let value = g.value(loss).item().to_f64_lossy();
        g.backward(loss)?;
        let mut grads = model.params.gradients(&g, &p);
        if !value.is_finite() || !finite_grads(&grads) {
            return Err(Error::Diverged {
                step,
                what: "non-finite background loss or gradient".into(),
            });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model.params, &grads, cfg.bg_lr)?;
        model.params.apply_buffer_updates(&g, &p);
        if step == 1 || step % cfg.log_every.max(1) == 0 || step == cfg.bg_pretrain_steps {
            let r = LogRecord {
                step,
                phase: PHASE_BACKGROUND,
                l_rec: value,
                l_pixel: 0.0,
                lr: cfg.bg_lr,
                warmup_factor: 0.0,
                total: value,
            };
            out.record(&r)?;
            log.push(r);
        }
    }
    out.checkpoint(model, "background.ckpt")?;
    Ok(log)
}

/// Phase of `step` (1-based) under `cfg`.
pub fn phase_of(cfg: &TrainConfig, step: usize) -> u8 {
    match cfg.scenario {
        Scenario::Bt => PHASE_JOINT,
        Scenario::FrozenBg => PHASE_FROZEN,
        Scenario::Ct if step <= cfg.phase2_steps => PHASE_FROZEN,
        Scenario::Ct => PHASE_JOINT,
    }
}

/// Backgrounds of every scene computed once with the current weights.
fn background_cache<T: Real>(model: &Model, planes: &[Vec<f64>]) -> Result<Vec<Vec<T>>> {
    let size = model.config.image_size;
    let mut cache = Vec::with_capacity(planes.len());
    let idx: Vec<usize> = (0..planes.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut g = Graph::<T>::new();
        let p = model.bind(&mut g, |_| false);
        let x = g.constant(stack(&planes[..], chunk, size)?);
        let bg = model.background(&mut g, &p, x)?;
        let per = 3 * size * size;
        cache.extend(g.value(bg).data().chunks(per).map(<[T]>::to_vec));
    }
    Ok(cache)
}

/// Foreground training (and joint fine-tuning) for the configured scenario.
/// CT and frozen-bg expect a pretrained background in `model`; the first
/// phase-2 steps keep `bg.*` fixed and reuse cached backgrounds.
pub fn train<T: Real>(
    model: &mut Model,
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
    eval_scenes: Option<&[LabeledScene]>,
    out: &mut RunOutput<'_>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    check_scenes(model, scenes)?;
    let size = model.config.image_size;
    let planes: Vec<Vec<f64>> = scenes.iter().map(LabeledScene::planar).collect();
    let mut batches = Batches::new(scenes.len(), seeded_rng(cfg.seed, STREAM_BATCHES));
    let mut dropout_rng = seeded_rng(cfg.seed, STREAM_DROPOUT);
    let mut opt = adam(cfg, model);
    let mut cache: Option<Vec<Vec<T>>> = None;
    let mut summary = TrainSummary {
        log: Vec::new(),
        evals: Vec::new(),
    };
    for step in 1..=cfg.total_steps {
        let phase = phase_of(cfg, step);
        let frozen = phase == PHASE_FROZEN;
        if !frozen {
            cache = None;
        } else if cache.is_none() {
            cache = Some(background_cache(model, &planes)?);
        }
        let lr = lr_schedule(step, cfg.lr, cfg.lr_warmup_steps, cfg.total_steps, cfg.lr_decay_at);
        let idx = batches.next(cfg.batch_size);

        let mut g = Graph::<T>::training();
        let p = model.bind(&mut g, |name| !(frozen && is_background_param(name)));
        let x = g.constant(stack(&planes, &idx, size)?);
        let bg = match &cache {
            Some(c) => {
                let data: Vec<T> = idx.iter().flat_map(|&i| c[i].iter().copied()).collect();
                Some(g.constant(Tensor::new(&[idx.len(), 3, size, size], data)?))
            }
            None => None,
        };
        let mut dropout = Dropout {
            p: model.config.encoder.dropout,
            rng: Some(&mut dropout_rng),
        };
        let f = model.forward(&mut g, &p, x, bg, &mut dropout)?;
        let (loss, parts) = total_loss(
            &mut g,
            f.scene.reconstruction,
            x,
            f.scene.weights,
            step,
            cfg.lambda_pixel,
            cfg.n_pixel,
        )?;
        g.backward(loss)?;
        let mut grads = model.params.gradients(&g, &p);
        if !parts.total.is_finite() || !finite_grads(&grads) {
            return Err(Error::Diverged {
                step,
                what: "non-finite loss or gradient".into(),
            });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model.params, &grads, lr)?;
        model.params.apply_buffer_updates(&g, &p);
        drop(g);

        let last = step == cfg.total_steps;
        if step == 1 || step % cfg.log_every.max(1) == 0 || last {
            let r = LogRecord {
                step,
                phase,
                l_rec: parts.rec,
                l_pixel: parts.pixel,
                lr,
                warmup_factor: parts.warmup_factor,
                total: parts.total,
            };
            out.record(&r)?;
            summary.log.push(r);
        }
        if let Some(ev) = eval_scenes {
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last {
                let r = EvalRecord::new(step, &evaluate::<T>(model, ev)?);
                out.record_eval(&r)?;
                summary.evals.push(r);
            }
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && !last {
            out.checkpoint(model, &format!("step_{step:06}.ckpt"))?;
        }
    }
    out.checkpoint(model, "final.ckpt")?;
    Ok(summary)
}

/// Segmentation and reconstruction of a batch of planar images.
pub struct Inference {
    /// Per image, `h * w` layer indices.
    pub labels: Vec<Vec<u8>>,
    /// Per image, planar `[3, h, w]` reconstruction in `[0, 1]`.
    pub reconstructions: Vec<Vec<f64>>,
}

/// Runs the model without gradients on planar `[3, h, w]` images.
pub fn infer<T: Real>(model: &Model, planes: &[Vec<f64>]) -> Result<Inference> {
    let size = model.config.image_size;
    let per = 3 * size * size;
    if let Some(p) = planes.iter().find(|p| p.len() != per) {
        return Err(Error::Config(format!(
            "image has {} values, model expects {per}",
            p.len()
        )));
    }
    let mut labels = Vec::with_capacity(planes.len());
    let mut reconstructions = Vec::with_capacity(planes.len());
    let idx: Vec<usize> = (0..planes.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut g = Graph::<T>::new();
        let p = model.bind(&mut g, |_| false);
        let x = g.constant(stack(planes, chunk, size)?);
        let f = model.forward(&mut g, &p, x, None, &mut Dropout::off())?;
        labels.extend(extract_segmentation(g.value(f.scene.weights)));
        reconstructions.extend(
            g.value(f.scene.reconstruction)
                .to_f64_vec()
                .chunks(per)
                .map(<[f64]>::to_vec),
        );
    }
    Ok(Inference {
        labels,
        reconstructions,
    })
}

/// Segments every scene and scores it against its labels.
pub fn evaluate<T: Real>(model: &Model, scenes: &[LabeledScene]) -> Result<MetricsReport> {
    let planes: Vec<Vec<f64>> = scenes.iter().map(LabeledScene::planar).collect();
    let inf = infer::<T>(model, &planes)?;
    let per_image = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            image_metrics(
                i,
                &inf.labels[i],
                &s.labels,
                Some((&inf.reconstructions[i], &planes[i])),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_images(per_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};
    use crate::data::generate_scene;

    fn tiny() -> RunConfig {
        let text = r#"{
            "model": {
                "image_size": 16,
                "slots": 2,
                "feature_generator": {"widths": [4, 8, 8]},
                "encoder": {"d_t": 8, "heads": 2, "ff_dim": 8, "layers": 1, "z_what_dim": 4},
                "background": {"latent_dim": 4, "widths": [4, 4]}
            },
            "train": {"total_steps": 6, "phase2_steps": 3, "batch_size": 2, "bg_pretrain_steps": 3,
                      "bg_batch_size": 2, "log_every": 1, "eval_every": 3, "n_pixel": 4, "lr_warmup_steps": 2},
            "data": {"image_size": 16, "count": 4}
        }"#;
        RunConfig::from_json(text).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batches::new(5, seeded_rng(0, 0));
        let mut seen = b.next(5);
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn phases() {
        let mut cfg = RunConfig::profile(Profile::Paper).train;
        assert_eq!(phase_of(&cfg, 30000), PHASE_FROZEN);
        assert_eq!(phase_of(&cfg, 30001), PHASE_JOINT);
        cfg.scenario = Scenario::Bt;
        assert_eq!(phase_of(&cfg, 1), PHASE_JOINT);
        cfg.scenario = Scenario::FrozenBg;
        assert_eq!(phase_of(&cfg, 125000), PHASE_FROZEN);
    }

    #[test]
    fn phase_two_keeps_background_bits() {
        let cfg = tiny();
        let scenes: Vec<_> = (0..4).map(|i| generate_scene(&cfg.data, i)).collect();
        let mut model = Model::new(&cfg.model, 0).unwrap();
        let bg_before: Vec<_> = model
            .params
            .iter()
            .filter(|(_, p)| is_background_param(&p.name))
            .map(|(_, p)| p.value.clone())
            .collect();
        let mut t = cfg.train.clone();
        t.total_steps = 3;
        let s = train::<f64>(&mut model, &scenes, &t, Some(&scenes), &mut RunOutput::default()).unwrap();
        let bg_after: Vec<_> = model
            .params
            .iter()
            .filter(|(_, p)| is_background_param(&p.name))
            .map(|(_, p)| p.value.clone())
            .collect();
        assert_eq!(bg_before, bg_after);
        assert!(s.log.iter().all(|r| r.phase == PHASE_FROZEN));
        assert_eq!(s.evals.len(), 1);
    }

    #[test]
    fn joint_phase_moves_background() {
        let cfg = tiny();
        let scenes: Vec<_> = (0..4).map(|i| generate_scene(&cfg.data, i)).collect();
        let mut model = Model::new(&cfg.model, 0).unwrap();
        let before = model.params.clone();
        let s = train::<f64>(&mut model, &scenes, &cfg.train, None, &mut RunOutput::default()).unwrap();
        assert_eq!(s.log.last().unwrap().phase, PHASE_JOINT);
        let id = model.params.id("bg.output.weight").unwrap();
        assert_ne!(before.get(id).value, model.params.get(id).value);
    }

    #[test]
    fn pretraining_touches_only_background() {
        let cfg = tiny();
        let scenes: Vec<_> = (0..4).map(|i| generate_scene(&cfg.data, i)).collect();
        let mut model = Model::new(&cfg.model, 0).unwrap();
        let before = model.params.clone();
        let log = pretrain_background::<f64>(&mut model, &scenes, &cfg.train, &mut RunOutput::default()).unwrap();
        assert_eq!(log.len(), 3);
        for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
            assert_eq!(a.value == b.value, !is_background_param(&a.name), "{}", a.name);
        }
    }

    #[test]
    fn log_lines_are_json() {
        let cfg = tiny();
        let scenes: Vec<_> = (0..4).map(|i| generate_scene(&cfg.data, i)).collect();
        let mut model = Model::new(&cfg.model, 0).unwrap();
        let mut buf = Vec::new();
        let mut out = RunOutput {
            log: Some(&mut buf),
            ..Default::default()
        };
        train::<f32>(&mut model, &scenes, &cfg.train, None, &mut out).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 6);
        assert!(text.contains("\"L_rec\""));
        assert_eq!(lines[3].phase, PHASE_JOINT);
    }
}
