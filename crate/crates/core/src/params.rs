//! Named parameter storage living outside any graph.
//!
//! Parameters are kept in 64-bit master copies and bound into a fresh
//! [`Graph`] of either precision for every forward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Optimized by gradient descent.
    Weight,
    /// Updated by the forward pass itself (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f64>,
    pub kind: Kind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<f64>, kind: Kind) -> Result<ParamId> {
        ensure!(
            !self.index.contains_key(name),
            "param_store",
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            kind,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == Kind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn weight_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == Kind::Weight && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces every value from `other`, which must hold the same names and
    /// shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Config(format!("parameter {} missing from source", p.name)))?;
            ensure!(
                src.value.shape() == p.value.shape(),
                "load_params",
                "{}: shape {:?} does not match {:?}",
                p.name,
                src.value.shape(),
                p.value.shape()
            );
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Adds every parameter to `g`. Weights for which `trainable` returns
    /// true become gradient leaves; everything else enters as a constant.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let grad = p.kind == Kind::Weight && trainable(&p.name);
                g.push_leaf(p.value.cast(), grad)
            })
            .collect();
        Bound { vars }
    }

    /// Copies running-statistic updates recorded in `g` back into the store.
    pub fn apply_buffer_updates<T: Real>(&mut self, g: &Graph<T>, bound: &Bound) {
        for (var, value) in g.buffer_updates() {
            if let Some(i) = bound.vars.iter().position(|v| v == var) {
                self.params[i].value = value.cast();
            }
        }
    }

    /// Collects accumulated gradients, one entry per parameter.
    pub fn gradients<T: Real>(&self, g: &Graph<T>, bound: &Bound) -> Vec<Option<Vec<f64>>> {
        bound
            .vars
            .iter()
            .map(|&v| g.grad(v).map(|d| d.iter().map(|x| x.to_f64_lossy()).collect()))
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Registers parameters under a name prefix, drawing initial values from a
/// seeded generator.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Uniform values in `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if bound > 0.0 {
            (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect()
        } else {
            vec![0.0; n]
        };
        let name = self.name(leaf);
        self.store.add(&name, Tensor::new(shape, data)?, Kind::Weight)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.add(&name, Tensor::full(shape, value), Kind::Weight)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.add(&name, Tensor::full(shape, value), Kind::Buffer)
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
