//! Run configuration: model, training and data settings with two built-in
//! profiles. User JSON is deep-merged over the selected profile and unknown
//! keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::nn::NormKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGeneratorConfig {
    /// Stem width followed by one width per downsample block.
    pub widths: Vec<usize>,
    pub norm: NormKind,
}

impl FeatureGeneratorConfig {
    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_t: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub anisotropic: bool,
    pub use_transformer: bool,
    pub dropout: f64,
    pub z_what_dim: usize,
}

impl EncoderConfig {
    pub fn d_s(&self) -> usize {
        if self.anisotropic {
            2
        } else {
            1
        }
    }

    /// Channels of the feature map: scale, activation and appearance.
    pub fn d_phi(&self) -> usize {
        self.d_s() + 1 + self.z_what_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundConfig {
    pub latent_dim: usize,
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square image side length.
    pub image_size: usize,
    pub slots: usize,
    pub feature_generator: FeatureGeneratorConfig,
    pub encoder: EncoderConfig,
    pub background: BackgroundConfig,
    /// Initial `log(alpha_0)`.
    pub alpha0_log_init: f64,
    /// Spatially varying background activation; not implemented.
    pub alpha0_per_pixel: bool,
}

impl ModelConfig {
    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn glimpse_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let s = self.image_size;
        let depth = self.feature_generator.depth();
        if self.slots == 0 {
            return fail("slots must be at least 1".into());
        }
        if !s.is_power_of_two() || s < 8 {
            return fail(format!("image_size must be a power of two >= 8, got {s}"));
        }
        if depth < 2 || s % (1 << depth) != 0 {
            return fail(format!(
                "feature_generator needs at least 2 downsample blocks and image_size divisible by 2^depth (depth {depth})"
            ));
        }
        if self.feature_generator.widths.iter().any(|&w| w == 0) {
            return fail("feature_generator widths must be positive".into());
        }
        let e = &self.encoder;
        if e.heads == 0 || e.d_t % e.heads != 0 {
            return fail(format!("d_t {} is not divisible by {} heads", e.d_t, e.heads));
        }
        if !(e.s_min > 0.0 && e.s_min < e.s_max) {
            return fail("need 0 < s_min < s_max".into());
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        let bw = &self.background.widths;
        if bw.is_empty() || s % (1 << bw.len()) != 0 {
            return fail("image_size must be divisible by 2^(background widths)".into());
        }
        if self.alpha0_per_pixel {
            return Err(Error::Unimplemented("per-pixel background activation"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Bt,
    Ct,
    FrozenBg,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bt" => Ok(Scenario::Bt),
            "ct" => Ok(Scenario::Ct),
            "frozen-bg" => Ok(Scenario::FrozenBg),
            other => Err(Error::Config(format!("unknown scenario {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub total_steps: usize,
    pub phase2_steps: usize,
    pub lr: f64,
    pub lr_warmup_steps: usize,
    /// Fraction of `total_steps` after which the learning rate drops tenfold.
    pub lr_decay_at: f64,
    pub lambda_pixel: f64,
    pub n_pixel: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub bg_pretrain_steps: usize,
    pub bg_lr: f64,
    pub bg_batch_size: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.phase2_steps > self.total_steps {
            return fail("phase2_steps must not exceed total_steps");
        }
        if !(self.lr > 0.0 && self.bg_lr > 0.0 && self.lambda_pixel >= 0.0 && self.adam_eps > 0.0) {
            return fail("rates must be positive");
        }
        if self.batch_size == 0 || self.bg_batch_size == 0 {
            return fail("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    /// One random color per scene.
    Solid,
    /// Random top and bottom colors blended vertically.
    VerticalGradient,
    /// The same color for every scene.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Sprite extent as a fraction of the image side, `[lo, hi]`.
    pub size_range: [f64; 2],
    pub background: BackgroundMode,
    pub occlusion: bool,
    pub seed: u64,
    /// Number of scenes in the training set.
    pub count: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size < 8 {
            return fail("scene image_size must be at least 8");
        }
        if self.max_objects == 0 || self.max_objects > 255 {
            return fail("max_objects must lie in [1, 255]");
        }
        if self.shapes.is_empty() {
            return fail("shapes must not be empty");
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return fail("size_range must satisfy 0 < lo <= hi <= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SceneSpec,
}

fn profile_value(profile: Profile) -> Value {
    let paper = serde_json::json!({
        "profile": "paper",
        "output_dir": "runs/paper",
        "precision": "f32",
        "model": {
            "image_size": 64,
            "slots": 4,
            "feature_generator": {"widths": [80, 128, 192, 256, 256, 256], "norm": "batch"},
            "encoder": {
                "d_t": 256, "heads": 8, "ff_dim": 512, "layers": 6,
                "s_min": 1.3, "s_max": 24.0, "anisotropic": false,
                "use_transformer": true, "dropout": 0.0, "z_what_dim": 32
            },
            "background": {"latent_dim": 64, "widths": [32, 64, 128, 256]},
            "alpha0_log_init": 11.0,
            "alpha0_per_pixel": false
        },
        "train": {
            "scenario": "ct",
            "total_steps": 125000,
            "phase2_steps": 30000,
            "lr": 4e-5,
            "lr_warmup_steps": 5000,
            "lr_decay_at": 0.9,
            "lambda_pixel": 1e-2,
            "n_pixel": 10000,
            "adam_beta1": 0.9,
            "adam_beta2": 0.98,
            "adam_eps": 1e-9,
            "batch_size": 64,
            "grad_clip": 1.0,
            "seed": 0,
            "bg_pretrain_steps": 2500,
            "bg_lr": 2e-3,
            "bg_batch_size": 128,
            "log_every": 100,
            "eval_every": 5000,
            "checkpoint_every": 5000
        },
        "data": {
            "image_size": 64,
            "max_objects": 3,
            "shapes": ["disc", "square", "triangle"],
            "size_range": [0.15, 0.3],
            "background": "solid",
            "occlusion": true,
            "seed": 0,
            "count": 512
        }
    });
    match profile {
        Profile::Paper => paper,
        Profile::Desk => {
            let desk = serde_json::json!({
                "profile": "desk",
                "output_dir": "runs/desk",
                "model": {
                    "feature_generator": {"widths": [16, 32, 48, 64], "norm": "group"},
                    "encoder": {"d_t": 64, "heads": 4, "ff_dim": 128, "layers": 2},
                    "background": {"latent_dim": 32, "widths": [16, 32, 64, 64]}
                },
                "train": {
                    "total_steps": 8000,
                    "phase2_steps": 2000,
                    "lr": 3e-4,
                    "lr_warmup_steps": 400,
                    "n_pixel": 800,
                    "batch_size": 8,
                    "bg_pretrain_steps": 1000,
                    "bg_batch_size": 16,
                    "log_every": 50,
                    "eval_every": 2000,
                    "checkpoint_every": 2000
                }
            });
            let mut v = paper;
            merge(&mut v, desk);
            v
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key and any
/// other value replaces the base value.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        Self::from_value(profile_value(profile)).expect("built-in profiles are valid")
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves a user document: its `profile` key (default `desk`) selects
    /// the base values, everything else overrides them field by field.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = profile_value(profile);
        merge(&mut base, user);
        Self::from_value(base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data image_size {} differs from model image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Applies a seed override to both training and data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }
}
