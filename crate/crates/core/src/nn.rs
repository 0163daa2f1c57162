//! Layers holding parameter handles; their weights live in a [`ParamStore`].

use crate::autodiff::{Graph, Real, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId};

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Fully connected layer applied to the last axis; weight is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut s = init.scope(name);
        Ok(Self {
            weight: s.uniform("weight", &[fan_in, fan_out], bound)?,
            bias: s.uniform("bias", &[fan_out], bound)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let mut s = init.scope(name);
        Ok(Self {
            weight: s.uniform("weight", &[cout, cin, k, k], bound)?,
            bias: s.uniform("bias", &[cout], bound)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        // Each output pixel sees about cin * (k / stride)^2 inputs.
        let fan_in = (cin * k * k) as f64 / (stride * stride) as f64;
        let bound = 1.0 / fan_in.max(1.0).sqrt();
        let mut s = init.scope(name);
        Ok(Self {
            weight: s.uniform("weight", &[cin, cout, k, k], bound)?,
            bias: s.uniform("bias", &[cout], bound)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Group,
    Batch,
}

/// Largest group count up to 8 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub enum Norm {
    Group {
        groups: usize,
        gamma: ParamId,
        beta: ParamId,
    },
    Batch {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Layer {
        gamma: ParamId,
        beta: ParamId,
    },
}

impl Norm {
    pub fn group(init: &mut Init<'_>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Norm::Group {
            groups,
            gamma: s.constant("gamma", &[channels], 1.0)?,
            beta: s.constant("beta", &[channels], 0.0)?,
        })
    }

    pub fn batch(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Norm::Batch {
            gamma: s.constant("gamma", &[channels], 1.0)?,
            beta: s.constant("beta", &[channels], 0.0)?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn layer(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Norm::Layer {
            gamma: s.constant("gamma", &[dim], 1.0)?,
            beta: s.constant("beta", &[dim], 0.0)?,
        })
    }

    /// Channel normalization of the requested kind.
    pub fn channels(init: &mut Init<'_>, name: &str, channels: usize, kind: NormKind) -> Result<Self> {
        match kind {
            NormKind::Group => Self::group(init, name, channels, default_groups(channels)),
            NormKind::Batch => Self::batch(init, name, channels),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match *self {
            Norm::Group { groups, gamma, beta } => {
                g.group_norm(x, groups, p.var(gamma), p.var(beta), NORM_EPS)
            }
            Norm::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
            } => g.batch_norm(
                x,
                p.var(gamma),
                p.var(beta),
                p.var(running_mean),
                p.var(running_var),
                BN_MOMENTUM,
                NORM_EPS,
            ),
            Norm::Layer { gamma, beta } => g.layer_norm(x, p.var(gamma), p.var(beta), NORM_EPS),
        }
    }
}

/// Convolution followed by normalization and CELU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: NormKind,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Self {
            conv: Conv2d::new(&mut s, "conv", cin, cout, k, stride, pad)?,
            norm: Norm::channels(&mut s, "norm", cout, norm)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.celu(y))
    }
}

/// `x + CELU(norm(conv3x3(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub inner: ConvBlock,
}

impl ResidualBlock {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, norm: NormKind) -> Result<Self> {
        Ok(Self {
            inner: ConvBlock::new(init, name, channels, channels, 3, 1, 1, norm)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.inner.forward(g, p, x)?;
        g.add(x, y)
    }
}

/// Transposed convolution followed by normalization and CELU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: ConvTranspose2d,
    pub norm: Norm,
}

impl UpBlock {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, norm: NormKind) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Self {
            conv: ConvTranspose2d::new(&mut s, "tconv", cin, cout, 4, 2, 1)?,
            norm: Norm::channels(&mut s, "norm", cout, norm)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.celu(y))
    }
}
