//! The full scene model: feature generator, object encoder, glimpse renderer
//! and background autoencoder sharing one parameter store.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::background::BackgroundModel;
use crate::config::ModelConfig;
use crate::encoder::{Dropout, ObjectEncoder, ObjectLatents};
use crate::error::Result;
use crate::feature_generator::{FeatureGenerator, FeatureMaps};
use crate::params::{seeded_rng, Bound, Init, Kind, ParamId, ParamStore};
use crate::renderer::{render, GlimpseGenerator, SceneDecomposition};

pub const ALPHA0_NAME: &str = "alpha0_log";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub generator: FeatureGenerator,
    pub encoder: ObjectEncoder,
    pub glimpses: GlimpseGenerator,
    pub background: BackgroundModel,
    pub alpha0_log: ParamId,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub maps: FeatureMaps,
    pub latents: ObjectLatents,
    pub background: Var,
    pub scene: SceneDecomposition,
}

pub fn is_background_param(name: &str) -> bool {
    name.starts_with("bg.")
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed, 1);
        let generator = FeatureGenerator::new(&mut Init::new(&mut params, &mut rng, "fg"), config)?;
        let mut rng = seeded_rng(seed, 2);
        let encoder = ObjectEncoder::new(&mut Init::new(&mut params, &mut rng, "enc"), config)?;
        let mut rng = seeded_rng(seed, 3);
        let glimpses = GlimpseGenerator::new(&mut Init::new(&mut params, &mut rng, "glimpse"), config)?;
        let mut rng = seeded_rng(seed, 4);
        let background = BackgroundModel::new(&mut Init::new(&mut params, &mut rng, "bg"), config)?;
        let alpha0_log = params.add(ALPHA0_NAME, Tensor::scalar(config.alpha0_log_init), Kind::Weight)?;
        Ok(Self {
            config: config.clone(),
            params,
            generator,
            encoder,
            glimpses,
            background,
            alpha0_log,
        })
    }

    /// Binds all parameters; names rejected by `trainable` become constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn background<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        self.background.forward(g, p, images)
    }

    /// Encodes and renders `images` `[B, 3, h, w]`. A precomputed background
    /// may be supplied instead of running the autoencoder.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        background: Option<Var>,
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardPass> {
        let maps = self.generator.forward(g, p, images)?;
        let latents = self.encoder.encode(g, p, &maps, dropout)?;
        let background = match background {
            Some(b) => b,
            None => self.background.forward(g, p, images)?,
        };
        let scene = render(g, p, &self.glimpses, &latents, background, p.var(self.alpha0_log))?;
        Ok(ForwardPass {
            maps,
            latents,
            background,
            scene,
        })
    }
}
