//! Convolutional autoencoder reconstructing the background layer.

use crate::autodiff::{Graph, Real, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::nn::{ConvBlock, ConvTranspose2d, Linear, NormKind, UpBlock};
use crate::params::{Bound, Init};

#[derive(Clone, Debug)]
pub struct BackgroundModel {
    image_size: usize,
    widths: Vec<usize>,
    encoder: Vec<ConvBlock>,
    to_latent: Linear,
    from_latent: Linear,
    decoder: Vec<UpBlock>,
    output: ConvTranspose2d,
}

impl BackgroundModel {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let widths = cfg.background.widths.clone();
        let n = widths.len();
        let side = cfg.image_size >> n;
        let flat = widths[n - 1] * side * side;
        let mut encoder = Vec::with_capacity(n);
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(init, &format!("enc{i}"), cin, c, 4, 2, 1, NormKind::Group)?);
            cin = c;
        }
        let to_latent = Linear::new(init, "to_latent", flat, cfg.background.latent_dim)?;
        let from_latent = Linear::new(init, "from_latent", cfg.background.latent_dim, flat)?;
        let mut decoder = Vec::with_capacity(n - 1);
        for i in (1..n).rev() {
            decoder.push(UpBlock::new(init, &format!("dec{i}"), widths[i], widths[i - 1], NormKind::Group)?);
        }
        let output = ConvTranspose2d::new(init, "output", widths[0], 3, 4, 2, 1)?;
        Ok(Self {
            image_size: cfg.image_size,
            widths,
            encoder,
            to_latent,
            from_latent,
            decoder,
            output,
        })
    }

    /// Background estimate `[B, 3, h, w]` in `[0, 1]` for images `[B, 3, h, w]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        ensure!(
            s.len() == 4 && s[1] == 3 && s[2] == self.image_size && s[3] == self.image_size,
            "reconstruct_background",
            "expected [B, 3, {0}, {0}], got {s:?}",
            self.image_size
        );
        let b = s[0];
        let mut x = image;
        for block in &self.encoder {
            x = block.forward(g, p, x)?;
        }
        let top = *self.widths.last().expect("validated non-empty");
        let side = self.image_size >> self.widths.len();
        x = g.reshape(x, &[b, top * side * side])?;
        x = self.to_latent.forward(g, p, x)?;
        x = self.from_latent.forward(g, p, x)?;
        x = g.celu(x);
        x = g.reshape(x, &[b, top, side, side])?;
        for block in &self.decoder {
            x = block.forward(g, p, x)?;
        }
        x = self.output.forward(g, p, x)?;
        Ok(g.sigmoid(x))
    }
}
