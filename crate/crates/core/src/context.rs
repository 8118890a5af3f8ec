//! Execution context binding a [`ParamStore`] to a [`Tape`].

use std::collections::{HashMap, HashSet};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::conv::ConvSpec;
use crate::kernels::norm::{BnMode, BN_EPS};
use crate::params::ParamStore;
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::{seeded_rng, Real, Tensor};

/// Switches that deliberately break an invariant, for exercising the checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TestHooks {
    /// Replace the update gate's two-way softmax with independent sigmoids.
    pub bypass_branch_normalization: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    pub bn: BnMode,
    pub dropout: bool,
    /// Record gate outputs into [`Context::probes`].
    pub collect_probes: bool,
    pub seed: u64,
    pub hooks: TestHooks,
}

impl ExecOptions {
    pub fn inference() -> Self {
        ExecOptions {
            bn: BnMode::Inference,
            dropout: false,
            collect_probes: false,
            seed: 0,
            hooks: TestHooks::default(),
        }
    }

    pub fn train() -> Self {
        ExecOptions {
            bn: BnMode::Train,
            ..Self::inference()
        }
    }
}

/// Gate quantities captured during a forward pass, as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub enum GateProbe {
    /// Sum of each spatial attention map over its positions, one entry per image.
    SpatialAttention { name: String, sums: Vec<f64>, min: f64 },
    /// Branch weights of an update gate.
    BranchWeights { name: String, u33: Vec<f64>, u55: Vec<f64> },
    /// Forget-gate decay factors.
    Forget { name: String, f: Vec<f64> },
}

/// Batch statistics observed by one batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Context<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
    bound_vars: HashSet<Var>,
    order: Vec<(String, Var)>,
    pub options: ExecOptions,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub probes: Vec<GateProbe>,
    pub rng: ChaCha8Rng,
}

impl<'p, T: Real> Context<'p, T> {
    /// `recording` selects a differentiable tape; otherwise intermediates are released.
    pub fn new(params: &'p ParamStore<T>, options: ExecOptions, recording: bool) -> Self {
        Context {
            tape: if recording {
                Tape::new()
            } else {
                Tape::inference()
            },
            params,
            bound: HashMap::new(),
            bound_vars: HashSet::new(),
            order: Vec::new(),
            rng: seeded_rng(options.seed),
            options,
            bn_updates: Vec::new(),
            probes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.get(name)?.clone());
        self.bound.insert(name.to_string(), v);
        self.bound_vars.insert(v);
        self.order.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters bound so far, in first-use order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.order
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.leaf(value)
    }

    pub fn release(&mut self, v: Var) {
        if !self.bound_vars.contains(&v) {
            self.tape.release(v);
        }
    }

    pub fn conv(&mut self, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(name)?;
        let b = if spec.bias {
            Some(self.param(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, spec)
    }

    /// Batch norm `name` in the context's mode.
    pub fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let out = match self.options.bn {
            BnMode::Train => self.tape.batch_norm(x, gamma, beta, BnStats::Batch, BN_EPS)?,
            BnMode::Inference => {
                let params = self.params;
                let mean = params.buffer(&format!("{name}.running_mean"))?.data();
                let var = params.buffer(&format!("{name}.running_var"))?.data();
                self.tape
                    .batch_norm(x, gamma, beta, BnStats::Running { mean, var }, BN_EPS)?
            }
        };
        if self.options.bn == BnMode::Train {
            self.bn_updates.push(BnUpdate {
                name: name.to_string(),
                mean: out.mean,
                var: out.var,
                count: out.count,
            });
        }
        Ok(out.out)
    }

    /// BN-ReLU-Conv.
    pub fn preact_conv(&mut self, x: Var, bn: &str, conv: &str, spec: ConvSpec) -> Result<Var> {
        let normed = self.batch_norm(x, bn)?;
        let act = self.tape.relu(normed)?;
        self.release(normed);
        let out = self.conv(act, conv, spec)?;
        self.release(act);
        Ok(out)
    }

    /// FC layer named `weight`, with an optional separate bias parameter.
    pub fn fc(&mut self, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
        let w = self.param(weight)?;
        let b = bias.map(|b| self.param(b)).transpose()?;
        self.tape.fully_connected(x, w, b)
    }

    pub fn probe(&mut self, probe: GateProbe) {
        if self.options.collect_probes {
            self.probes.push(probe);
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.tape.value(v)
    }
}

/// Folds recorded batch statistics into the store's running buffers.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) -> Result<()> {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for u in updates {
        let correction = if u.count > 1 {
            T::lit(u.count as f64 / (u.count as f64 - 1.0))
        } else {
            T::one()
        };
        let rm = store.buffer_mut(&format!("{}.running_mean", u.name))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        let rv = store.buffer_mut(&format!("{}.running_var", u.name))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(&u.var) {
            *r = keep * *r + m * b * correction;
        }
    }
    Ok(())
}
