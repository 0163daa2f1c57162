//! Checkpoint round trips, training determinism and long-run stability on a
//! miniature configuration.

mod common;

use std::fs;

use ast_core::checkpoint;
use ast_core::data::generate_scene;
use ast_core::encoder::Dropout;
use ast_core::model::Model;
use ast_core::train::{pretrain_background, train, RunOutput};
use ast_core::{Error, Graph, Real, Tensor};

fn forward_output<T: Real>(model: &Model) -> Vec<T> {
    let cfg = common::tiny_run_config();
    let scene = generate_scene(&cfg.data, 3);
    let mut g = Graph::<T>::new();
    let p = model.bind(&mut g, |_| false);
    let x = g.constant(Tensor::from_f64(&[1, 3, 16, 16], &scene.planar()).unwrap());
    let f = model.forward(&mut g, &p, x, None, &mut Dropout::off()).unwrap();
    let mut out = g.value(f.scene.reconstruction).data().to_vec();
    out.extend_from_slice(g.value(f.scene.weights).data());
    out
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    let model = Model::new(&common::tiny_model_config(), 21).unwrap();
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), fs::read(&path).unwrap());
    let a: Vec<f32> = forward_output(&model);
    let b: Vec<f32> = forward_output(&loaded);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(!dir.path().join("nested/model.tmp").exists());
}

#[test]
fn header_is_a_json_line_with_offsets() {
    let model = Model::new(&common::tiny_model_config(), 0).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let (header, start) = checkpoint::read_header(&bytes, "x".as_ref()).unwrap();
    assert_eq!(header.format_version, checkpoint::FORMAT_VERSION);
    let mut offset = 0;
    for e in &header.manifest {
        assert_eq!(e.byte_offset, offset);
        offset += 4 * e.shape.iter().product::<usize>();
    }
    assert_eq!(bytes.len() - start, offset);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&common::tiny_model_config(), 0).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = std::str::from_utf8(&bytes[..nl]).unwrap().to_string();

    let truncated = dir.path().join("truncated.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(checkpoint::load(&truncated), Err(Error::Checkpoint { .. })));

    let version = dir.path().join("version.ckpt");
    let mut v = header.replace("\"format_version\":1", "\"format_version\":7").into_bytes();
    v.extend_from_slice(&bytes[nl..]);
    fs::write(&version, v).unwrap();
    let err = checkpoint::load(&version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(matches!(checkpoint::load(&garbage), Err(Error::Checkpoint { .. })));

    let missing = dir.path().join("missing.ckpt");
    assert!(matches!(checkpoint::load(&missing), Err(Error::Io { .. })));
}

#[test]
fn background_copy_requires_matching_config() {
    let cfg = common::tiny_model_config();
    let source = Model::new(&cfg, 1).unwrap();
    let mut target = Model::new(&cfg, 2).unwrap();
    checkpoint::copy_background(&source, &mut target).unwrap();
    for (_, p) in source.params.iter().filter(|(_, p)| p.name.starts_with("bg.")) {
        let id = target.params.id(&p.name).unwrap();
        assert_eq!(target.params.get(id).value, p.value);
    }
    let mut other = cfg.clone();
    other.background.latent_dim += 1;
    let mut mismatched = Model::new(&other, 0).unwrap();
    assert!(checkpoint::copy_background(&source, &mut mismatched).is_err());
}

fn run_ct_f64() -> (String, Vec<u8>) {
    let cfg = common::tiny_run_config();
    let scenes: Vec<_> = (0..cfg.data.count as u64).map(|i| generate_scene(&cfg.data, i)).collect();
    let mut model = Model::new(&cfg.model, cfg.train.seed).unwrap();
    let mut log = Vec::new();
    let mut out = RunOutput {
        log: Some(&mut log),
        ..Default::default()
    };
    pretrain_background::<f64>(&mut model, &scenes, &cfg.train, &mut out).unwrap();
    train::<f64>(&mut model, &scenes, &cfg.train, Some(&scenes), &mut out).unwrap();
    (String::from_utf8(log).unwrap(), checkpoint::to_bytes(&model).unwrap())
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (log_a, ckpt_a) = run_ct_f64();
    let (log_b, ckpt_b) = run_ct_f64();
    assert_eq!(log_a.lines().count(), 3 + 6);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn checkpoints_are_written_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(&cfg.data, i)).collect();
    let mut model = Model::new(&cfg.model, 0).unwrap();
    let mut out = RunOutput {
        checkpoint_dir: Some(dir.path()),
        ..Default::default()
    };
    pretrain_background::<f32>(&mut model, &scenes, &cfg.train, &mut out).unwrap();
    train::<f32>(&mut model, &scenes, &cfg.train, None, &mut out).unwrap();
    for name in ["background.ckpt", "step_000003.ckpt", "final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let final_model = checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(checkpoint::to_bytes(&final_model).unwrap(), fs::read(dir.path().join("final.ckpt")).unwrap());
}

/// `train` stops with `Diverged` on any non-finite loss or gradient, so a
/// completed run certifies finiteness at every step.
#[test]
fn thousand_step_run_stays_finite() {
    let mut cfg = common::tiny_run_config();
    cfg.train.total_steps = 1000;
    cfg.train.phase2_steps = 300;
    cfg.train.log_every = 100;
    cfg.train.eval_every = 0;
    cfg.train.checkpoint_every = 0;
    cfg.train.n_pixel = 200;
    cfg.train.lr_warmup_steps = 50;
    let scenes: Vec<_> = (0..8).map(|i| generate_scene(&cfg.data, i)).collect();
    let mut model = Model::new(&cfg.model, 0).unwrap();
    let summary = train::<f32>(&mut model, &scenes, &cfg.train, None, &mut RunOutput::default()).unwrap();
    assert!(summary.log.iter().all(|r| r.total.is_finite()));
    assert!(model.params.iter().all(|(_, p)| p.value.all_finite()));
}
