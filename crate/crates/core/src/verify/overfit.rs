//! Full-batch SGD on a tiny synthetic dataset, as evidence that gradients
//! flow end to end.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use crate::arch::config::{MacroConfig, Stem};
use crate::arch::exec::forward_on;
use crate::arch::graph::{build_model, ModelGraph, INPUT_CHANNELS};
use crate::context::{apply_bn_updates, Context, ExecOptions};
use crate::error::{Error, Result};
use crate::kernels::norm::BN_MOMENTUM;
use crate::params::ParamStore;
use crate::tensor::{seeded_rng, Shape, Tensor};

/// Window of the moving average used to judge the loss trend.
pub const SMOOTHING_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitConfig {
    pub model: MacroConfig,
    pub samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            model: toy_model(),
            samples: 32,
            steps: 500,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Blocks `(2, 2)` with growth `(8, 16)` on 8x8 inputs, 10 classes.
pub fn toy_model() -> MacroConfig {
    MacroConfig::new("toy", Stem::Cifar, &[(2, 8), (2, 16)], 10, 8)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverfitTrace {
    /// Cross-entropy before each update.
    pub losses: Vec<f64>,
    /// Training accuracy before each update.
    pub accuracy: Vec<f64>,
    /// Accuracy after the last update.
    pub final_accuracy: f64,
    pub final_loss: f64,
}

impl OverfitTrace {
    /// Whether the moving average of the loss never increases.
    pub fn smoothed_monotone(&self) -> bool {
        moving_average(&self.losses, SMOOTHING_WINDOW)
            .windows(2)
            .all(|w| w[1] <= w[0])
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    xs.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Gaussian images with uniformly drawn labels.
pub fn synthetic_dataset(samples: usize, resolution: usize, classes: usize, seed: u64) -> Result<(Tensor<f64>, Vec<usize>)> {
    let mut rng = seeded_rng(seed);
    let images = Tensor::randn(Shape::new(samples, INPUT_CHANNELS, resolution, resolution)?, 1.0, &mut rng);
    let labels = (0..samples).map(|_| rng.random_range(0..classes)).collect();
    Ok((images, labels))
}

fn accuracy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| {
            let best = (0..s.c)
                .max_by(|&a, &b| logits.at(n, a, 0, 0).total_cmp(&logits.at(n, b, 0, 0)))
                .unwrap_or(0);
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Loss and accuracy of one full-batch pass, plus gradients when `train` is set.
struct StepResult {
    loss: f64,
    accuracy: f64,
    grads: Vec<(String, Tensor<f64>)>,
}

fn step(
    model: &ModelGraph,
    store: &mut ParamStore<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    seed: u64,
    train: bool,
) -> Result<StepResult> {
    let opts = ExecOptions {
        seed,
        ..ExecOptions::train()
    };
    let mut cx = Context::new(store, opts, train);
    let x = cx.input(images.clone());
    let logits = forward_on(&mut cx, model, x)?.logits;
    let acc = accuracy(cx.value(logits)?, labels);
    let loss = cx.tape.cross_entropy(logits, labels)?;
    let loss_value = cx.value(loss)?.data()[0];
    let mut grads = Vec::new();
    if train && loss_value.is_finite() {
        let g = cx.tape.backward(loss)?;
        for (name, var) in cx.bound_params() {
            let shape = cx.tape.shape(*var)?;
            grads.push((name.clone(), g.get_or_zeros(*var, shape)));
        }
    }
    let updates = std::mem::take(&mut cx.bn_updates);
    drop(cx);
    if train {
        apply_bn_updates(store, &updates, BN_MOMENTUM)?;
    }
    Ok(StepResult {
        loss: loss_value,
        accuracy: acc,
        grads,
    })
}

pub fn overfit_toy(cfg: &OverfitConfig) -> Result<OverfitTrace> {
    let model = build_model(&cfg.model)?;
    let mut store = ParamStore::<f64>::init(model.layout(), cfg.seed);
    let (images, labels) = synthetic_dataset(cfg.samples, cfg.model.input, cfg.model.classes, cfg.seed.wrapping_add(1))?;
    let mut velocity: HashMap<String, Tensor<f64>> = HashMap::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut accs = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let r = step(&model, &mut store, &images, &labels, cfg.seed, true)?;
        if !r.loss.is_finite() {
            return Err(Error::Divergence { step: t });
        }
        losses.push(r.loss);
        accs.push(r.accuracy);
        for (name, g) in r.grads {
            let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(&name)?;
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = cfg.momentum * *vi + gi;
                *pi -= cfg.lr * *vi;
            }
        }
    }
    let last = step(&model, &mut store, &images, &labels, cfg.seed, false)?;
    if !last.loss.is_finite() {
        return Err(Error::Divergence { step: cfg.steps });
    }
    Ok(OverfitTrace {
        losses,
        accuracy: accs,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
    })
}
