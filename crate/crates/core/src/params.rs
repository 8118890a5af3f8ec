//! Named parameter layouts and their instantiated stores.

use indexmap::IndexMap;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::kernels::linear::fc_weight_shape;
use crate::tensor::{seeded_rng, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Conv or FC weight; `fan_out` sets the init scale.
    Weight { fan_out: usize },
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

/// Ordered list of learnable parameters plus batch-norm running buffers.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ParamLayout {
    pub params: Vec<ParamSpec>,
    pub buffers: Vec<(String, Shape)>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, shape: Shape, kind: ParamKind) {
        self.params.push(ParamSpec { name, shape, kind });
    }

    pub fn conv(&mut self, name: &str, spec: &ConvSpec) {
        let ws = spec.weight_shape();
        let fan_out = spec.out_channels * spec.kernel.0 * spec.kernel.1;
        self.push(name.to_string(), ws, ParamKind::Weight { fan_out });
        if spec.bias {
            self.push(format!("{name}.bias"), desc(spec.out_channels), ParamKind::Bias);
        }
    }

    /// FC weight `(c_out, c_in, 1, 1)`; no bias.
    pub fn fc_weight(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.push(
            name.to_string(),
            fc_weight_shape(c_in, c_out),
            ParamKind::Weight { fan_out: c_out },
        );
    }

    pub fn bias(&mut self, name: &str, channels: usize) {
        self.push(name.to_string(), desc(channels), ParamKind::Bias);
    }

    /// `<name>.gamma`, `<name>.beta` and the two running buffers.
    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.push(format!("{name}.gamma"), desc(channels), ParamKind::BnGamma);
        self.push(format!("{name}.beta"), desc(channels), ParamKind::BnBeta);
        self.buffers.push((format!("{name}.running_mean"), desc(channels)));
        self.buffers.push((format!("{name}.running_var"), desc(channels)));
    }

    pub fn extend(&mut self, other: ParamLayout) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Number of learnable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.shape.numel()).sum()
    }
}

fn desc(c: usize) -> Shape {
    Shape {
        n: 1,
        c,
        h: 1,
        w: 1,
    }
}

/// Instantiated parameters and buffers, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    /// Gaussian weights scaled by `sqrt(2 / fan_out)`, zero biases, unit gamma,
    /// zero beta, running mean 0 and running variance 1.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self::init_with(layout, &mut rng)
    }

    pub fn init_with<R: Rng + ?Sized>(layout: &ParamLayout, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for p in &layout.params {
            let t = match p.kind {
                ParamKind::Weight { fan_out } => {
                    Tensor::randn(p.shape, (2.0 / fan_out.max(1) as f64).sqrt(), rng)
                }
                ParamKind::Bias | ParamKind::BnBeta => Tensor::zeros(p.shape),
                ParamKind::BnGamma => Tensor::ones(p.shape),
            };
            store.params.insert(p.name.clone(), t);
        }
        for (name, shape) in &layout.buffers {
            let t = if name.ends_with("running_var") {
                Tensor::ones(*shape)
            } else {
                Tensor::zeros(*shape)
            };
            store.buffers.insert(name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.buffers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Learnable scalar count; running buffers are excluded.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
