//! U-net producing the feature map and the attention logits at stride 4.

use crate::autodiff::{Graph, Real, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, ConvBlock, NormKind, ResidualBlock, UpBlock};
use crate::params::{Bound, Init};

/// Uniform init bounds of the attention-logit head.
const HEAD_WEIGHT_BOUND: f64 = 0.17;
const HEAD_BIAS_BOUND: f64 = 0.1;

#[derive(Clone, Debug)]
struct Down {
    conv: ConvBlock,
    residual: ResidualBlock,
}

#[derive(Clone, Debug)]
struct Up {
    residual: ResidualBlock,
    up: UpBlock,
}

/// Output of the feature generator.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    /// `[B, d_phi, h/4, w/4]`.
    pub features: Var,
    /// `[B, K, h/4, w/4]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct FeatureGenerator {
    image_size: usize,
    d_phi: usize,
    slots: usize,
    stem: ConvBlock,
    downs: Vec<Down>,
    center: ConvBlock,
    ups: Vec<Up>,
    merge: ConvBlock,
    refine: Conv2d,
    feature_head: Conv2d,
    logit_head: Conv2d,
}

impl FeatureGenerator {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let widths = &cfg.feature_generator.widths;
        let norm: NormKind = cfg.feature_generator.norm;
        let depth = cfg.feature_generator.depth();
        let d_phi = cfg.encoder.d_phi();
        let stem = ConvBlock::new(init, "stem", 3, widths[0], 3, 1, 1, norm)?;
        let mut downs = Vec::with_capacity(depth);
        for l in 1..=depth {
            let mut s = init.scope(&format!("down{l}"));
            downs.push(Down {
                conv: ConvBlock::new(&mut s, "conv", widths[l - 1], widths[l], 4, 2, 1, norm)?,
                residual: ResidualBlock::new(&mut s, "residual", widths[l], norm)?,
            });
        }
        let center = ConvBlock::new(init, "center", widths[depth], widths[depth], 3, 1, 1, norm)?;
        // Upsample from the deepest level until stride 4 is reached; each
        // block consumes the running map concatenated with its skip.
        let mut ups = Vec::new();
        let mut channels = widths[depth];
        for l in (3..=depth).rev() {
            let cat = channels + widths[l];
            let mut s = init.scope(&format!("up{l}"));
            ups.push(Up {
                residual: ResidualBlock::new(&mut s, "residual", cat, norm)?,
                up: UpBlock::new(&mut s, "up", cat, widths[l - 1], norm)?,
            });
            channels = widths[l - 1];
        }
        let merge = ConvBlock::new(init, "merge", channels + widths[2], d_phi, 3, 1, 1, norm)?;
        let refine = Conv2d::new(init, "refine", d_phi, d_phi, 3, 1, 1)?;
        let feature_head = Conv2d::new(init, "feature_head", d_phi, d_phi, 1, 1, 0)?;
        let logit_head = {
            let mut s = init.scope("logit_head");
            Conv2d {
                weight: s.uniform("weight", &[cfg.slots, d_phi, 1, 1], HEAD_WEIGHT_BOUND)?,
                bias: s.uniform("bias", &[cfg.slots], HEAD_BIAS_BOUND)?,
                stride: 1,
                pad: 0,
            }
        };
        Ok(Self {
            image_size: cfg.image_size,
            d_phi,
            slots: cfg.slots,
            stem,
            downs,
            center,
            ups,
            merge,
            refine,
            feature_head,
            logit_head,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<FeatureMaps> {
        let s = g.shape(image).to_vec();
        ensure!(
            s.len() == 4 && s[1] == 3 && s[2] == self.image_size && s[3] == self.image_size,
            "generate_feature_maps",
            "expected [B, 3, {0}, {0}] images, got {s:?}",
            self.image_size
        );
        let mut skips = Vec::with_capacity(self.downs.len() + 1);
        let mut x = self.stem.forward(g, p, image)?;
        skips.push(x);
        for d in &self.downs {
            x = d.conv.forward(g, p, x)?;
            x = d.residual.forward(g, p, x)?;
            skips.push(x);
        }
        x = self.center.forward(g, p, x)?;
        let depth = self.downs.len();
        for (up, level) in self.ups.iter().zip((3..=depth).rev()) {
            x = g.concat(&[x, skips[level]], 1)?;
            x = up.residual.forward(g, p, x)?;
            x = up.up.forward(g, p, x)?;
        }
        x = g.concat(&[x, skips[2]], 1)?;
        x = self.merge.forward(g, p, x)?;
        let r = self.refine.forward(g, p, x)?;
        x = g.add(x, r)?;
        let features = self.feature_head.forward(g, p, x)?;
        let logits = self.logit_head.forward(g, p, x)?;
        Ok(FeatureMaps { features, logits })
    }

    pub fn d_phi(&self) -> usize {
        self.d_phi
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn logit_head(&self) -> &Conv2d {
        &self.logit_head
    }
}
