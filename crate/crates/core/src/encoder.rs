//! Object encoder: localization, slot refinement by a transformer encoder
//! without positional encoding, and the split into object latents.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Var};
use crate::config::{EncoderConfig, ModelConfig};
use crate::error::{ensure, Result};
use crate::feature_generator::{FeatureGenerator, FeatureMaps};
use crate::localization::{aggregate_features, normalize_attention, soft_argmax, CoordinateGrid};
use crate::nn::{Linear, Norm};
use crate::params::{Bound, Init};

/// Per-slot `(x, y, phi)` rows: `[B, K, 2 + d_phi]`.
#[derive(Clone, Copy, Debug)]
pub struct SlotTriplets(pub Var);

#[derive(Clone, Copy, Debug)]
pub struct ObjectLatents {
    /// `[B, K, z_what_dim]`.
    pub z_what: Var,
    /// `[B, K, 2]`, clamped to `[-1, 1]`.
    pub position: Var,
    /// `[B, K, d_s]` inverse scale in `[s_min, s_max]`.
    pub scale: Var,
    /// `[B, K]`, positive.
    pub alpha: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Self {
            heads,
            query: Linear::new(&mut s, "query", d, d)?,
            key: Linear::new(&mut s, "key", d, d)?,
            value: Linear::new(&mut s, "value", d, d)?,
            out: Linear::new(&mut s, "out", d, d)?,
        })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, k, d) = (s[0], s[1], s[2]);
        let x = g.reshape(x, &[b, k, self.heads, d / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// Self-attention across the second axis of `x` `[B, K, d]`; returns the
    /// output and the attention weights `[B, heads, K, K]`.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        ensure!(s.len() == 3, "multi_head_self_attention", "expected [B, K, d], got {s:?}");
        let (b, k, d) = (s[0], s[1], s[2]);
        ensure!(
            d % self.heads == 0,
            "multi_head_self_attention",
            "{d} is not divisible by {} heads",
            self.heads
        );
        let q = self.query.forward(g, p, x)?;
        let kk = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let q = self.split_heads(g, q)?;
        let kk = self.split_heads(g, kk)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose_last(kk)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, T::cast(1.0 / ((d / self.heads) as f64).sqrt()));
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, k, d])?;
        Ok((self.out.forward(g, p, ctx)?, weights))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x)?.0)
    }
}

/// Post-norm encoder layer: attention, add, norm, feed-forward, add, norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Self {
            attention: MultiHeadAttention::new(&mut s, "attention", cfg.d_t, cfg.heads)?,
            norm1: Norm::layer(&mut s, "norm1", cfg.d_t)?,
            ff1: Linear::new(&mut s, "ff1", cfg.d_t, cfg.ff_dim)?,
            ff2: Linear::new(&mut s, "ff2", cfg.ff_dim, cfg.d_t)?,
            norm2: Norm::layer(&mut s, "norm2", cfg.d_t)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let a = self.attention.forward(g, p, x)?;
        let a = dropout.apply(g, a)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = dropout.apply(g, h)?;
        let h = self.ff2.forward(g, p, h)?;
        let h = dropout.apply(g, h)?;
        let x = g.add(x, h)?;
        self.norm2.forward(g, p, x)
    }
}

/// Dropout that is active only in training graphs with a random source.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 && g.is_training() => {
                let n = g.value(x).numel();
                let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                g.dropout(x, self.p, &u)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlotRefiner {
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub project: Linear,
}

#[derive(Clone, Debug)]
pub struct ObjectEncoder {
    pub config: EncoderConfig,
    pub grid: CoordinateGrid,
    pub refiner: Option<SlotRefiner>,
}

impl ObjectEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let e = &cfg.encoder;
        let width = e.d_phi() + 2;
        let refiner = if e.use_transformer {
            let embed = Linear::new(init, "embed", width, e.d_t)?;
            let layers = (0..e.layers)
                .map(|i| EncoderLayer::new(init, &format!("layer{i}"), e))
                .collect::<Result<Vec<_>>>()?;
            let project = Linear::new(init, "project", e.d_t, width)?;
            Some(SlotRefiner { embed, layers, project })
        } else {
            None
        };
        let side = cfg.feature_size();
        Ok(Self {
            config: e.clone(),
            grid: CoordinateGrid::new(side, side),
            refiner,
        })
    }

    /// Triplets `(x0, y0, phi0)` from the feature maps.
    pub fn localize<T: Real>(&self, g: &mut Graph<T>, maps: &FeatureMaps) -> Result<SlotTriplets> {
        let attention = normalize_attention(g, maps.logits)?;
        let xy = soft_argmax(g, attention, &self.grid)?;
        let phi = aggregate_features(g, attention, maps.features)?;
        Ok(SlotTriplets(g.concat(&[xy, phi], 2)?))
    }

    /// Transformer refinement over the slots of each image. Identity when the
    /// transformer is disabled.
    pub fn refine_slots<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        slots: SlotTriplets,
        dropout: &mut Dropout<'_>,
    ) -> Result<SlotTriplets> {
        let s = g.shape(slots.0).to_vec();
        let width = self.config.d_phi() + 2;
        ensure!(
            s.len() == 3 && s[2] == width,
            "refine_slots",
            "expected [B, K, {width}], got {s:?}"
        );
        let Some(r) = &self.refiner else {
            return Ok(slots);
        };
        let mut x = r.embed.forward(g, p, slots.0)?;
        for layer in &r.layers {
            x = layer.forward(g, p, x, dropout)?;
        }
        Ok(SlotTriplets(r.project.forward(g, p, x)?))
    }

    pub fn split_latents<T: Real>(&self, g: &mut Graph<T>, refined: SlotTriplets) -> Result<ObjectLatents> {
        split_latents(g, refined, &self.config)
    }

    /// Full encoding pipeline from feature maps to latents.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        maps: &FeatureMaps,
        dropout: &mut Dropout<'_>,
    ) -> Result<ObjectLatents> {
        let slots = self.localize(g, maps)?;
        let refined = self.refine_slots(g, p, slots, dropout)?;
        self.split_latents(g, refined)
    }
}

/// Splits refined rows `(x, y, s, alpha, z_what)` and maps each part to its
/// valid range.
pub fn split_latents<T: Real>(g: &mut Graph<T>, refined: SlotTriplets, cfg: &EncoderConfig) -> Result<ObjectLatents> {
    let s = g.shape(refined.0).to_vec();
    let d_s = cfg.d_s();
    ensure!(
        s.len() == 3 && s[2] == 2 + cfg.d_phi(),
        "split_latents",
        "expected [B, K, {}], got {s:?}",
        2 + cfg.d_phi()
    );
    let parts = g.split(refined.0, 2, &[2, d_s, 1, cfg.z_what_dim])?;
    let position = g.clamp(parts[0], -T::one(), T::one());
    let sig = g.sigmoid(parts[1]);
    let scale = g.mul_scalar(sig, T::cast(cfg.s_max - cfg.s_min));
    let scale = g.add_scalar(scale, T::cast(cfg.s_min));
    let alpha = g.exp(parts[2]);
    let alpha = g.reshape(alpha, &[s[0], s[1]])?;
    Ok(ObjectLatents {
        z_what: parts[3],
        position,
        scale,
        alpha,
    })
}

/// Full encoder: feature generator followed by the object encoder.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    generator: &FeatureGenerator,
    encoder: &ObjectEncoder,
    image: Var,
) -> Result<ObjectLatents> {
    let maps = generator.forward(g, p, image)?;
    encoder.encode(g, p, &maps, &mut Dropout::off())
}
