//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every target is reduced to the scalar `L = sum(R * y)` with a seeded random
//! weight tensor `R`, so each output element contributes with its own weight.
//! Each coordinate is perturbed by `h = 1e-6 * max(1, |theta|)` and the
//! numeric derivative `sum(R * (y(theta + h) - y(theta - h))) / 2h` is compared with
//! the tape's gradient using `|a - n| / max(|a|, |n|, 1e-8)`.

use std::fmt;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::config::{MacroConfig, Stem};
use crate::arch::exec::forward_on;
use crate::arch::graph::{build_model, ModelGraph, NodeKind, INPUT_CHANNELS};
use crate::context::{Context, ExecOptions};
use crate::error::{Error, Result};
use crate::gates::spatial_conv;
use crate::kernels::conv::ConvSpec;
use crate::kernels::linear::fc_weight_shape;
use crate::kernels::norm::BnMode;
use crate::kernels::pointwise::Activation;
use crate::kernels::pool::PoolSpec;
use crate::kernels::softmax::AxisSet;
use crate::params::ParamStore;
use crate::smg::{smg_forward, SmgConfig};
use crate::tape::Var;
use crate::tensor::{seeded_rng, Dtype, Shape, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const RELATIVE_STEP: f64 = 1e-6;
/// Tensors above this size are checked on a sample of coordinates.
pub const FULL_CHECK_LIMIT: usize = 200;
pub const SAMPLED_COORDINATES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpTarget {
    Conv { spec: ConvSpec },
    BatchNorm { mode: BnMode },
    Activation { kind: Activation },
    SpatialSoftmax,
    BranchSoftmax,
    Concat,
    Add,
    BroadcastMul,
    MaxPool,
    GlobalAvgPool,
    AttentionPool,
    FullyConnected,
    CrossEntropy,
    Dropout,
}

impl fmt::Display for OpTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpTarget::Conv { spec } => write!(
                f,
                "conv2d {}->{} k{}x{} s{} p{} d{} g{}",
                spec.in_channels,
                spec.out_channels,
                spec.kernel.0,
                spec.kernel.1,
                spec.stride,
                spec.padding,
                spec.dilation,
                spec.groups
            ),
            OpTarget::BatchNorm { mode } => write!(f, "batch_norm ({mode:?})"),
            OpTarget::Activation { kind } => write!(f, "{kind:?}"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GradTarget {
    Op(OpTarget),
    Smg(SmgConfig),
    Model(MacroConfig),
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradTarget::Op(op) => op.fmt(f),
            GradTarget::Smg(c) => write!(f, "smg {}->{} g{} s{}", c.in_channels, c.out_channels, c.groups, c.stride),
            GradTarget::Model(c) => write!(f, "model {}", c.name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FailingCoordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest `|a - n|`, useful when failures sit on near-zero gradients.
    pub max_abs_err: f64,
    pub failing: Vec<FailingCoordinate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub target: String,
    pub dtype: Dtype,
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failing.is_empty())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub dtype: Dtype,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            dtype: Dtype::F64,
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Everything one check needs: leaves, BN mode and the function under test.
struct Problem<'a> {
    store: ParamStore<f64>,
    bn: BnMode,
    build: Box<dyn Fn(&mut Context<'_, f64>) -> Result<Var> + 'a>,
}

fn evaluate(p: &Problem<'_>, store: &ParamStore<f64>, seed: u64) -> Result<Tensor<f64>> {
    let opts = ExecOptions {
        bn: p.bn,
        dropout: true,
        seed,
        ..ExecOptions::inference()
    };
    let mut cx = Context::new(store, opts, false);
    let y = (p.build)(&mut cx)?;
    cx.value(y).cloned()
}

fn run_check(label: String, p: Problem<'_>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.dtype != Dtype::F64 {
        return Err(Error::UnsupportedDtype(format!(
            "gradient checks need double precision, got {:?}",
            opts.dtype
        )));
    }
    let y0 = evaluate(&p, &p.store, opts.seed)?;
    let r = Tensor::randn(y0.shape(), 1.0, &mut seeded_rng(opts.seed ^ 0x5eed));
    let exec = ExecOptions {
        bn: p.bn,
        dropout: true,
        seed: opts.seed,
        ..ExecOptions::inference()
    };
    let mut cx = Context::new(&p.store, exec, true);
    let y = (p.build)(&mut cx)?;
    let rv = cx.input(r.clone());
    let prod = cx.tape.mul(y, rv)?;
    let loss = cx.tape.sum(prod)?;
    let grads = cx.tape.backward(loss)?;

    let mut rng = seeded_rng(opts.seed.wrapping_add(17));
    let mut params = Vec::new();
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut perturbed = p.store.clone();
    for (name, var) in cx.bound_params() {
        let value = p.store.get(name)?;
        let analytic = grads.get_or_zeros(*var, value.shape());
        let coords = coordinates(value.len(), &mut rng);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            failing: Vec::new(),
        };
        for i in coords {
            let theta = value.data()[i];
            let h = RELATIVE_STEP * theta.abs().max(1.0);
            perturbed.get_mut(name)?.data_mut()[i] = theta + h;
            let yp = evaluate(&p, &perturbed, opts.seed)?;
            perturbed.get_mut(name)?.data_mut()[i] = theta - h;
            let ym = evaluate(&p, &perturbed, opts.seed)?;
            perturbed.get_mut(name)?.data_mut()[i] = theta;
            // differencing before weighting keeps unaffected outputs exact
            let dl: f64 = yp
                .data()
                .iter()
                .zip(ym.data())
                .zip(r.data())
                .map(|((a, b), w)| (a - b) * w)
                .sum();
            let numeric = dl / (2.0 * h);
            let a = analytic.data()[i];
            let e = relative_error(a, numeric);
            check.max_rel_err = check.max_rel_err.max(e);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if !(e < opts.tolerance) {
                check.failing.push(FailingCoordinate {
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
        worst = worst.max(check.max_rel_err);
        worst_abs = worst_abs.max(check.max_abs_err);
        params.push(check);
    }
    Ok(GradCheckReport {
        target: label,
        dtype: opts.dtype,
        step: RELATIVE_STEP,
        tolerance: opts.tolerance,
        params,
        max_rel_err: worst,
        max_abs_err: worst_abs,
    })
}

fn coordinates(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= FULL_CHECK_LIMIT {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, SAMPLED_COORDINATES).into_vec();
        v.sort_unstable();
        v
    }
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("positive dims")
}

fn randn(s: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(s, 1.0, rng)
}

fn uniform(s: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(s, lo, hi, rng)
}

fn random_bn(store: &mut ParamStore<f64>, name: &str, c: usize, rng: &mut ChaCha8Rng) {
    let d = shape(1, c, 1, 1);
    store.insert(format!("{name}.gamma"), uniform(d, 0.5, 1.5, rng));
    store.insert(format!("{name}.beta"), Tensor::randn(d, 0.5, rng));
    store.insert_buffer(format!("{name}.running_mean"), Tensor::randn(d, 0.5, rng));
    store.insert_buffer(format!("{name}.running_var"), uniform(d, 0.5, 1.5, rng));
}

/// Replaces every BN state and bias of `store` with seeded random values.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed");
        let s = t.shape();
        if name.ends_with(".gamma") {
            *t = uniform(s, 0.5, 1.5, rng);
        } else if name.ends_with(".beta") || name.ends_with("bias") || is_gate_bias(&name) {
            *t = Tensor::randn(s, 0.5, rng);
        }
    }
    let bufs: Vec<String> = store.buffers().map(|(n, _)| n.to_string()).collect();
    for name in bufs {
        let t = store.buffer_mut(&name).expect("listed");
        let s = t.shape();
        *t = if name.ends_with("running_var") {
            uniform(s, 0.5, 1.5, rng)
        } else {
            Tensor::randn(s, 0.5, rng)
        };
    }
}

fn is_gate_bias(name: &str) -> bool {
    matches!(name.rsplit('.').next(), Some("b" | "b33" | "b55" | "b1" | "b2"))
}

fn op_problem(op: OpTarget, rng: &mut ChaCha8Rng) -> Problem<'static> {
    let mut store = ParamStore::new();
    let mut bn = BnMode::Inference;
    let build: Box<dyn Fn(&mut Context<'_, f64>) -> Result<Var>> = match op {
        OpTarget::Conv { spec } => {
            store.insert("x", randn(shape(1, spec.in_channels, 7, 7), rng));
            store.insert("w", randn(spec.weight_shape(), rng));
            if spec.bias {
                store.insert("w.bias", randn(shape(1, spec.out_channels, 1, 1), rng));
            }
            Box::new(move |cx| {
                let x = cx.param("x")?;
                cx.conv(x, "w", spec)
            })
        }
        OpTarget::BatchNorm { mode } => {
            bn = mode;
            store.insert("x", Tensor::randn(shape(3, 4, 3, 3), 2.0, rng));
            random_bn(&mut store, "bn", 4, rng);
            Box::new(|cx| {
                let x = cx.param("x")?;
                cx.batch_norm(x, "bn")
            })
        }
        OpTarget::Activation { kind } => {
            store.insert("x", uniform(shape(2, 3, 4, 4), -2.0, 2.0, rng));
            Box::new(move |cx| {
                let x = cx.param("x")?;
                cx.tape.activation(x, kind)
            })
        }
        OpTarget::SpatialSoftmax => {
            store.insert("x", randn(shape(2, 1, 4, 5), rng));
            Box::new(|cx| {
                let x = cx.param("x")?;
                Ok(cx.tape.softmax(&[x], AxisSet::spatial())?[0])
            })
        }
        OpTarget::BranchSoftmax => {
            store.insert("a", randn(shape(2, 4, 1, 1), rng));
            store.insert("b", randn(shape(2, 4, 1, 1), rng));
            Box::new(|cx| {
                let (a, b) = (cx.param("a")?, cx.param("b")?);
                let u = cx.tape.softmax(&[a, b], AxisSet::branch())?;
                cx.tape.concat(&u)
            })
        }
        OpTarget::Concat => {
            store.insert("a", randn(shape(2, 2, 3, 3), rng));
            store.insert("b", randn(shape(2, 3, 3, 3), rng));
            Box::new(|cx| {
                let (a, b) = (cx.param("a")?, cx.param("b")?);
                cx.tape.concat(&[a, b])
            })
        }
        OpTarget::Add => {
            store.insert("a", randn(shape(2, 3, 4, 4), rng));
            store.insert("b", randn(shape(2, 3, 4, 4), rng));
            store.insert("d", randn(shape(2, 3, 1, 1), rng));
            Box::new(|cx| {
                let (a, b, d) = (cx.param("a")?, cx.param("b")?, cx.param("d")?);
                let s = cx.tape.add(a, b)?;
                cx.tape.add(s, d)
            })
        }
        OpTarget::BroadcastMul => {
            store.insert("a", randn(shape(2, 3, 4, 4), rng));
            store.insert("b", randn(shape(2, 3, 4, 4), rng));
            store.insert("d", randn(shape(2, 3, 1, 1), rng));
            Box::new(|cx| {
                let (a, b, d) = (cx.param("a")?, cx.param("b")?, cx.param("d")?);
                let left = cx.tape.mul(d, a)?;
                let right = cx.tape.mul(a, b)?;
                let both = cx.tape.add(left, right)?;
                cx.tape.mul(both, d)
            })
        }
        OpTarget::MaxPool => {
            store.insert("x", randn(shape(1, 2, 7, 7), rng));
            Box::new(|cx| {
                let x = cx.param("x")?;
                cx.tape.max_pool(x, PoolSpec::MAX3X3_S2)
            })
        }
        OpTarget::GlobalAvgPool => {
            store.insert("x", randn(shape(2, 3, 4, 4), rng));
            Box::new(|cx| {
                let x = cx.param("x")?;
                cx.tape.global_avg_pool(x)
            })
        }
        OpTarget::AttentionPool => {
            store.insert("x", randn(shape(2, 3, 4, 4), rng));
            store.insert("s", uniform(shape(2, 1, 4, 4), 0.0, 1.0, rng));
            Box::new(|cx| {
                let (x, s) = (cx.param("x")?, cx.param("s")?);
                cx.tape.attention_pool(x, s)
            })
        }
        OpTarget::FullyConnected => {
            store.insert("x", randn(shape(3, 5, 1, 1), rng));
            store.insert("w", randn(fc_weight_shape(5, 4), rng));
            store.insert("b", randn(shape(1, 4, 1, 1), rng));
            Box::new(|cx| {
                let x = cx.param("x")?;
                cx.fc(x, "w", Some("b"))
            })
        }
        OpTarget::CrossEntropy => {
            store.insert("x", randn(shape(4, 5, 1, 1), rng));
            Box::new(|cx| {
                let x = cx.param("x")?;
                cx.tape.cross_entropy(x, &[0, 3, 1, 4])
            })
        }
        OpTarget::Dropout => {
            store.insert("x", randn(shape(1, 3, 4, 4), rng));
            Box::new(|cx| {
                let x = cx.param("x")?;
                let Context { tape, rng, .. } = cx;
                tape.dropout(x, 0.3, rng)
            })
        }
    };
    Problem { store, bn, build }
}

fn smg_problem(cfg: SmgConfig, rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    cfg.validate()?;
    let mut store = ParamStore::init_with(&cfg.layout("m"), rng);
    randomize(&mut store, rng);
    store.insert("input", randn(shape(2, cfg.in_channels, 6, 6), rng));
    Ok(Problem {
        store,
        bn: BnMode::Inference,
        build: Box::new(move |cx| {
            let x = cx.param("input")?;
            Ok(smg_forward(cx, "m", &cfg, x)?.out)
        }),
    })
}

fn model_problem(graph: ModelGraph, rng: &mut ChaCha8Rng) -> Problem<'static> {
    let mut store = ParamStore::init_with(graph.layout(), rng);
    randomize(&mut store, rng);
    let r = graph.config().input;
    store.insert("input", randn(shape(2, INPUT_CHANNELS, r, r), rng));
    Problem {
        store,
        bn: BnMode::Inference,
        build: Box::new(move |cx| {
            let x = cx.param("input")?;
            Ok(forward_on(cx, &graph, x)?.logits)
        }),
    }
}

pub fn gradcheck(target: &GradTarget, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.dtype != Dtype::F64 {
        return Err(Error::UnsupportedDtype(format!(
            "gradient checks need double precision, got {:?}",
            opts.dtype
        )));
    }
    let mut rng = seeded_rng(opts.seed);
    let problem = match target {
        GradTarget::Op(op) => op_problem(*op, &mut rng),
        GradTarget::Smg(cfg) => smg_problem(*cfg, &mut rng)?,
        GradTarget::Model(cfg) => model_problem(build_model(cfg)?, &mut rng),
    };
    let n = problem.store.num_elements();
    if n > 100_000 {
        return Err(Error::InvalidArgument(format!(
            "gradient check target has {n} parameters, more than 100000"
        )));
    }
    run_check(target.to_string(), problem, opts)
}

/// The `16 -> 8` channel SMG module used as the module-level check.
pub fn toy_smg() -> SmgConfig {
    SmgConfig::hybrid(16, 8)
}

/// A two-block model small enough for an exhaustive check.
pub fn tiny_model() -> MacroConfig {
    MacroConfig::new("tiny", Stem::Cifar, &[(2, 4), (2, 8)], 5, 8)
}

fn shrink_conv(spec: ConvSpec) -> ConvSpec {
    if spec.is_depthwise() {
        let c = spec.groups.min(4);
        return ConvSpec {
            in_channels: c,
            out_channels: c,
            groups: c,
            ..spec
        };
    }
    let g = spec.groups;
    ConvSpec {
        in_channels: g * (spec.in_channels / g).min(3),
        out_channels: g * (spec.out_channels / g).min(3),
        ..spec
    }
}

/// One target per op kind that appears when `model` is evaluated and trained.
pub fn op_targets_for(model: &ModelGraph) -> Vec<OpTarget> {
    let mut out: Vec<OpTarget> = Vec::new();
    let mut add = |t: OpTarget| {
        if !out.contains(&t) {
            out.push(t);
        }
    };
    let bn = |add: &mut dyn FnMut(OpTarget)| {
        add(OpTarget::BatchNorm { mode: BnMode::Train });
        add(OpTarget::BatchNorm {
            mode: BnMode::Inference,
        });
    };
    for node in model.nodes() {
        match node.kind {
            NodeKind::Input { .. } => {}
            NodeKind::Conv { spec } => add(OpTarget::Conv {
                spec: shrink_conv(spec),
            }),
            NodeKind::BatchNorm { .. } => bn(&mut add),
            NodeKind::Relu => add(OpTarget::Activation {
                kind: Activation::Relu,
            }),
            NodeKind::MaxPool { .. } => add(OpTarget::MaxPool),
            NodeKind::Smg { config } => {
                for spec in [
                    config.conv1_spec(),
                    config.gconv_spec(),
                    config.dw33_spec(),
                    config.dw55_spec(),
                    spatial_conv(config.out_channels),
                ] {
                    add(OpTarget::Conv {
                        spec: shrink_conv(spec),
                    });
                }
                bn(&mut add);
                for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
                    add(OpTarget::Activation { kind });
                }
                for t in [
                    OpTarget::SpatialSoftmax,
                    OpTarget::AttentionPool,
                    OpTarget::Concat,
                    OpTarget::FullyConnected,
                    OpTarget::BranchSoftmax,
                    OpTarget::BroadcastMul,
                    OpTarget::Add,
                ] {
                    add(t);
                }
            }
            NodeKind::Concat => add(OpTarget::Concat),
            NodeKind::GlobalAvgPool => add(OpTarget::GlobalAvgPool),
            NodeKind::Dropout { .. } => add(OpTarget::Dropout),
            NodeKind::Fc { .. } => {
                add(OpTarget::FullyConnected);
                add(OpTarget::CrossEntropy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::preset::Preset;

    fn pass(t: GradTarget) -> GradCheckReport {
        let r = gradcheck(&t, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{t}: {:#?}", r.params.iter().filter(|p| !p.failing.is_empty()).collect::<Vec<_>>());
        r
    }

    #[test]
    fn tanh_is_tight() {
        let r = pass(GradTarget::Op(OpTarget::Activation {
            kind: Activation::Tanh,
        }));
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn grouped_dilated_conv() {
        let spec = ConvSpec::new(4, 4, 3).groups(2).dilation(2).padding(2);
        pass(GradTarget::Op(OpTarget::Conv { spec }));
    }

    #[test]
    fn single_precision_is_rejected() {
        let opts = GradCheckOptions {
            dtype: Dtype::F32,
            ..Default::default()
        };
        let t = GradTarget::Op(OpTarget::Concat);
        assert!(matches!(gradcheck(&t, &opts), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn preset_op_kinds_cover_the_stems() {
        let b = op_targets_for(&build_model(&Preset::B.config()).unwrap());
        assert!(b.contains(&OpTarget::MaxPool));
        assert!(b.contains(&OpTarget::Dropout));
        assert!(b.iter().any(|t| matches!(t, OpTarget::Conv { spec } if spec.stride == 2 && spec.groups == 1)));
        assert!(b.iter().any(|t| matches!(t, OpTarget::Conv { spec } if spec.dilation == 2)));
    }
}
