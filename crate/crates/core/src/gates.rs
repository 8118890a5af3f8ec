//! Update and forget gates.
//!
//! Both gates start with global attention pooling: a 1x1 convolution maps the
//! feature map to one channel, a softmax over all `H*W` positions turns it
//! into weights, and each channel is reduced to the weighted sum of its
//! positions.
//!
//! The update gate pools the two excitation branches, concatenates the two
//! descriptors, maps them through `FC -> BN -> +b -> tanh` to a hidden vector
//! `h`, produces one logit per branch and channel with two FC heads, and
//! mixes the pooled descriptors with a per-channel two-way softmax:
//! `v = u33 * z33 + u55 * z55`.
//!
//! The forget gate pools the squeezed map and computes
//! `f = sigmoid(W2 tanh(BN(W1 z + b1)) + b2)`.

use rand::Rng;

use crate::context::{Context, ExecOptions, GateProbe};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::kernels::norm::{BnMode, BnState};
use crate::kernels::softmax::AxisSet;
use crate::params::{ParamLayout, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UpdateGateConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl UpdateGateConfig {
    /// `floor(2C / r)`, at least one.
    pub fn hidden(&self) -> usize {
        (2 * self.channels / self.reduction.max(1)).max(1)
    }

    pub fn layout(&self, prefix: &str) -> ParamLayout {
        let (c, h) = (self.channels, self.hidden());
        let mut l = ParamLayout::new();
        l.conv(&format!("{prefix}.ws33"), &spatial_conv(c));
        l.conv(&format!("{prefix}.ws55"), &spatial_conv(c));
        l.fc_weight(&format!("{prefix}.W"), 2 * c, h);
        l.bias(&format!("{prefix}.b"), h);
        l.batch_norm(&format!("{prefix}.bn"), h);
        l.fc_weight(&format!("{prefix}.W33"), h, c);
        l.bias(&format!("{prefix}.b33"), c);
        l.fc_weight(&format!("{prefix}.W55"), h, c);
        l.bias(&format!("{prefix}.b55"), c);
        l
    }

    pub fn param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden());
        // two spatial convs, FC + bias, BN affine, two heads with biases
        2 * c + (2 * c * h + h) + 2 * h + 2 * (h * c + c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ForgetGateConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl ForgetGateConfig {
    /// `floor(C / r)`, at least one.
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }

    pub fn layout(&self, prefix: &str) -> ParamLayout {
        let (c, h) = (self.channels, self.hidden());
        let mut l = ParamLayout::new();
        l.conv(&format!("{prefix}.wsf"), &spatial_conv(c));
        l.fc_weight(&format!("{prefix}.W1"), c, h);
        l.bias(&format!("{prefix}.b1"), h);
        l.batch_norm(&format!("{prefix}.bn"), h);
        l.fc_weight(&format!("{prefix}.W2"), h, c);
        l.bias(&format!("{prefix}.b2"), c);
        l
    }

    pub fn param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden());
        c + (c * h + h) + 2 * h + (h * c + c)
    }
}

/// The `C -> 1` 1x1 convolution producing a spatial attention logit map.
pub fn spatial_conv(channels: usize) -> ConvSpec {
    ConvSpec::new(channels, 1, 1)
}

/// Attention-weighted global pooling of `x` with the 1x1 filter `weight`.
pub fn spatial_attention_pool<T: Real>(cx: &mut Context<'_, T>, x: Var, weight: &str) -> Result<Var> {
    let c = cx.tape.shape(x)?.c;
    let logits = cx.conv(x, weight, spatial_conv(c))?;
    let attn = cx.tape.softmax(&[logits], AxisSet::spatial())?[0];
    cx.release(logits);
    if cx.options.collect_probes {
        let a = cx.value(attn)?;
        let s = a.shape();
        let sums = (0..s.n)
            .map(|n| a.plane(n, 0).iter().map(|v| v.as_f64()).sum())
            .collect();
        let min = a.data().iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
        cx.probe(GateProbe::SpatialAttention {
            name: weight.to_string(),
            sums,
            min,
        });
    }
    let z = cx.tape.attention_pool(x, attn)?;
    cx.release(attn);
    Ok(z)
}

#[derive(Clone, Copy, Debug)]
pub struct UpdateGateOutput {
    pub v: Var,
    pub z33: Var,
    pub z55: Var,
    pub u33: Var,
    pub u55: Var,
}

pub fn update_gate<T: Real>(
    cx: &mut Context<'_, T>,
    prefix: &str,
    cfg: &UpdateGateConfig,
    x33: Var,
    x55: Var,
) -> Result<UpdateGateOutput> {
    let (s33, s55) = (cx.tape.shape(x33)?, cx.tape.shape(x55)?);
    if s33 != s55 {
        return Err(Error::ShapeMismatch {
            op: "update gate branches",
            lhs: s33,
            rhs: s55,
        });
    }
    if s33.c != cfg.channels {
        return Err(Error::InvalidArgument(format!(
            "update gate over {} channels got {s33}",
            cfg.channels
        )));
    }
    let z33 = spatial_attention_pool(cx, x33, &format!("{prefix}.ws33"))?;
    let z55 = spatial_attention_pool(cx, x55, &format!("{prefix}.ws55"))?;
    let z = cx.tape.concat(&[z33, z55])?;
    let wz = cx.fc(z, &format!("{prefix}.W"), None)?;
    let normed = cx.batch_norm(wz, &format!("{prefix}.bn"))?;
    let b = cx.param(&format!("{prefix}.b"))?;
    let shifted = cx.tape.add(normed, b)?;
    let h = cx.tape.tanh(shifted)?;
    let logit33 = cx.fc(h, &format!("{prefix}.W33"), Some(&format!("{prefix}.b33")))?;
    let logit55 = cx.fc(h, &format!("{prefix}.W55"), Some(&format!("{prefix}.b55")))?;
    let (u33, u55) = if cx.options.hooks.bypass_branch_normalization {
        (cx.tape.sigmoid(logit33)?, cx.tape.sigmoid(logit55)?)
    } else {
        let u = cx.tape.softmax(&[logit33, logit55], AxisSet::branch())?;
        (u[0], u[1])
    };
    if cx.options.collect_probes {
        let to_f64 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        let probe = GateProbe::BranchWeights {
            name: prefix.to_string(),
            u33: to_f64(cx.value(u33)?),
            u55: to_f64(cx.value(u55)?),
        };
        cx.probe(probe);
    }
    let a = cx.tape.mul(u33, z33)?;
    let bb = cx.tape.mul(u55, z55)?;
    let v = cx.tape.add(a, bb)?;
    for t in [z, wz, normed, shifted, h, logit33, logit55, a, bb] {
        cx.release(t);
    }
    Ok(UpdateGateOutput { v, z33, z55, u33, u55 })
}

#[derive(Clone, Copy, Debug)]
pub struct ForgetGateOutput {
    pub f: Var,
    pub z: Var,
}

pub fn forget_gate<T: Real>(
    cx: &mut Context<'_, T>,
    prefix: &str,
    cfg: &ForgetGateConfig,
    xp: Var,
) -> Result<ForgetGateOutput> {
    let s = cx.tape.shape(xp)?;
    if s.c != cfg.channels {
        return Err(Error::InvalidArgument(format!(
            "forget gate over {} channels got {s}",
            cfg.channels
        )));
    }
    let z = spatial_attention_pool(cx, xp, &format!("{prefix}.wsf"))?;
    let a = cx.fc(z, &format!("{prefix}.W1"), Some(&format!("{prefix}.b1")))?;
    let normed = cx.batch_norm(a, &format!("{prefix}.bn"))?;
    let h = cx.tape.tanh(normed)?;
    let logits = cx.fc(h, &format!("{prefix}.W2"), Some(&format!("{prefix}.b2")))?;
    let f = cx.tape.sigmoid(logits)?;
    if cx.options.collect_probes {
        let vals = cx.value(f)?.data().iter().map(|v| v.as_f64()).collect();
        cx.probe(GateProbe::Forget {
            name: prefix.to_string(),
            f: vals,
        });
    }
    for t in [a, normed, h, logits] {
        cx.release(t);
    }
    Ok(ForgetGateOutput { f, z })
}

fn bn_into_store<T: Real>(bn: &BnState<T>, name: &str, store: &mut ParamStore<T>) -> Result<()> {
    let c = bn.channels();
    let d = |v: &[T]| Tensor::from_vec(Shape::descriptor(1, c).expect("positive"), v.to_vec());
    store.insert(format!("{name}.gamma"), d(&bn.gamma)?);
    store.insert(format!("{name}.beta"), d(&bn.beta)?);
    store.insert_buffer(format!("{name}.running_mean"), d(&bn.running_mean)?);
    store.insert_buffer(format!("{name}.running_var"), d(&bn.running_var)?);
    Ok(())
}

fn random_bn<T: Real, R: Rng + ?Sized>(c: usize, mode: BnMode, rng: &mut R) -> BnState<T> {
    let mut bn = BnState::new(c, mode);
    let mut draw = |lo: f64, hi: f64| -> Vec<T> { (0..c).map(|_| T::lit(rng.random_range(lo..hi))).collect() };
    bn.gamma = draw(0.5, 1.5);
    bn.beta = draw(-0.5, 0.5);
    bn.running_mean = draw(-0.5, 0.5);
    bn.running_var = draw(0.5, 1.5);
    bn
}

/// All weights of one update gate.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateGateParams<T> {
    pub ws33: Tensor<T>,
    pub ws55: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub bn: BnState<T>,
    pub w33: Tensor<T>,
    pub b33: Tensor<T>,
    pub w55: Tensor<T>,
    pub b55: Tensor<T>,
    pub reduction: usize,
}

/// Tensor results of a standalone gate evaluation.
#[derive(Clone, Debug)]
pub struct UpdateGateValues<T> {
    pub v: Tensor<T>,
    pub z33: Tensor<T>,
    pub z55: Tensor<T>,
    pub u33: Tensor<T>,
    pub u55: Tensor<T>,
}

impl<T: Real> UpdateGateParams<T> {
    /// Standard-normal weights scaled by `scale`, with randomized BN state.
    pub fn random<R: Rng + ?Sized>(cfg: &UpdateGateConfig, scale: f64, mode: BnMode, rng: &mut R) -> Self {
        let (c, h) = (cfg.channels, cfg.hidden());
        let fc = |i: usize, o: usize, rng: &mut R| Tensor::randn(crate::kernels::linear::fc_weight_shape(i, o), scale, rng);
        let d = |n: usize, rng: &mut R| Tensor::randn(Shape::descriptor(1, n).expect("positive"), scale, rng);
        UpdateGateParams {
            ws33: Tensor::randn(spatial_conv(c).weight_shape(), scale, rng),
            ws55: Tensor::randn(spatial_conv(c).weight_shape(), scale, rng),
            w: fc(2 * c, h, rng),
            b: d(h, rng),
            bn: random_bn(h, mode, rng),
            w33: fc(h, c, rng),
            b33: d(c, rng),
            w55: fc(h, c, rng),
            b55: d(c, rng),
            reduction: cfg.reduction,
        }
    }

    pub fn config(&self) -> UpdateGateConfig {
        UpdateGateConfig {
            channels: self.ws33.shape().c,
            reduction: self.reduction,
        }
    }

    pub fn store_into(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(format!("{prefix}.ws33"), self.ws33.clone());
        store.insert(format!("{prefix}.ws55"), self.ws55.clone());
        store.insert(format!("{prefix}.W"), self.w.clone());
        store.insert(format!("{prefix}.b"), self.b.clone());
        bn_into_store(&self.bn, &format!("{prefix}.bn"), store)?;
        store.insert(format!("{prefix}.W33"), self.w33.clone());
        store.insert(format!("{prefix}.b33"), self.b33.clone());
        store.insert(format!("{prefix}.W55"), self.w55.clone());
        store.insert(format!("{prefix}.b55"), self.b55.clone());
        Ok(())
    }

    /// Evaluates the gate on its own, in the mode of `self.bn`.
    pub fn evaluate(&self, x33: &Tensor<T>, x55: &Tensor<T>) -> Result<UpdateGateValues<T>> {
        self.evaluate_with(x33, x55, ExecOptions::inference())
    }

    pub fn evaluate_with(
        &self,
        x33: &Tensor<T>,
        x55: &Tensor<T>,
        options: ExecOptions,
    ) -> Result<UpdateGateValues<T>> {
        let mut store = ParamStore::new();
        self.store_into("gate", &mut store)?;
        let mut cx = Context::new(&store, ExecOptions { bn: self.bn.mode, ..options }, true);
        let a = cx.input(x33.clone());
        let b = cx.input(x55.clone());
        let out = update_gate(&mut cx, "gate", &self.config(), a, b)?;
        let get = |v: Var| cx.value(v).cloned();
        Ok(UpdateGateValues {
            v: get(out.v)?,
            z33: get(out.z33)?,
            z55: get(out.z55)?,
            u33: get(out.u33)?,
            u55: get(out.u55)?,
        })
    }
}

/// All weights of one forget gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgetGateParams<T> {
    pub wsf: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub bn: BnState<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub reduction: usize,
}

impl<T: Real> ForgetGateParams<T> {
    pub fn random<R: Rng + ?Sized>(cfg: &ForgetGateConfig, scale: f64, mode: BnMode, rng: &mut R) -> Self {
        let (c, h) = (cfg.channels, cfg.hidden());
        let fc = |i: usize, o: usize, rng: &mut R| Tensor::randn(crate::kernels::linear::fc_weight_shape(i, o), scale, rng);
        let d = |n: usize, rng: &mut R| Tensor::randn(Shape::descriptor(1, n).expect("positive"), scale, rng);
        ForgetGateParams {
            wsf: Tensor::randn(spatial_conv(c).weight_shape(), scale, rng),
            w1: fc(c, h, rng),
            b1: d(h, rng),
            bn: random_bn(h, mode, rng),
            w2: fc(h, c, rng),
            b2: d(c, rng),
            reduction: cfg.reduction,
        }
    }

    pub fn config(&self) -> ForgetGateConfig {
        ForgetGateConfig {
            channels: self.wsf.shape().c,
            reduction: self.reduction,
        }
    }

    pub fn store_into(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(format!("{prefix}.wsf"), self.wsf.clone());
        store.insert(format!("{prefix}.W1"), self.w1.clone());
        store.insert(format!("{prefix}.b1"), self.b1.clone());
        bn_into_store(&self.bn, &format!("{prefix}.bn"), store)?;
        store.insert(format!("{prefix}.W2"), self.w2.clone());
        store.insert(format!("{prefix}.b2"), self.b2.clone());
        Ok(())
    }

    /// Returns `f` as an `(N, C, 1, 1)` descriptor.
    pub fn evaluate(&self, xp: &Tensor<T>) -> Result<Tensor<T>> {
        let mut store = ParamStore::new();
        self.store_into("gate", &mut store)?;
        let opts = ExecOptions {
            bn: self.bn.mode,
            ..ExecOptions::inference()
        };
        let mut cx = Context::new(&store, opts, true);
        let x = cx.input(xp.clone());
        let out = forget_gate(&mut cx, "gate", &self.config(), x)?;
        cx.value(out.f).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn hidden_widths_floor_and_clamp() {
        assert_eq!(UpdateGateConfig { channels: 32, reduction: 2 }.hidden(), 32);
        assert_eq!(UpdateGateConfig { channels: 5, reduction: 4 }.hidden(), 2);
        assert_eq!(ForgetGateConfig { channels: 3, reduction: 4 }.hidden(), 1);
    }

    #[test]
    fn layout_matches_closed_form() {
        for (c, r) in [(8, 2), (12, 2), (60, 4), (7, 3)] {
            let u = UpdateGateConfig { channels: c, reduction: r };
            assert_eq!(u.layout("u").num_elements(), u.param_count());
            let f = ForgetGateConfig { channels: c, reduction: r };
            assert_eq!(f.layout("f").num_elements(), f.param_count());
        }
    }

    #[test]
    fn zero_forget_gate_is_one_half() {
        let mut rng = seeded_rng(1);
        let cfg = ForgetGateConfig { channels: 6, reduction: 2 };
        let mut p = ForgetGateParams::<f64>::random(&cfg, 0.0, BnMode::Inference, &mut rng);
        p.bn.gamma = vec![0.0; 3];
        p.bn.beta = vec![0.0; 3];
        let x = Tensor::randn(Shape::new(2, 6, 4, 4).unwrap(), 1.0, &mut rng);
        let f = p.evaluate(&x).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn branch_mismatch_is_an_error() {
        let mut rng = seeded_rng(2);
        let cfg = UpdateGateConfig { channels: 4, reduction: 2 };
        let p = UpdateGateParams::<f64>::random(&cfg, 1.0, BnMode::Inference, &mut rng);
        let a = Tensor::zeros(Shape::new(1, 4, 3, 3).unwrap());
        let b = Tensor::zeros(Shape::new(1, 4, 4, 3).unwrap());
        assert!(p.evaluate(&a, &b).is_err());
    }
}
