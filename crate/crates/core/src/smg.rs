//! The SMG module: squeeze cell, multi-scale excitation cell and the gated
//! fusion `O = f * X' + v`.
//!
//! The squeeze cell is `BN-ReLU-conv1x1 (C~ -> floor(alpha*C))` followed by
//! `BN-ReLU-gconv3x3 (-> C, stride S, g groups)`. Its output `X'` is the
//! reused feature map. The excitation cell runs two pre-activated depthwise
//! 3x3 convolutions on `X'`, the second with dilation 2 to cover a 5x5 field.
//! The update gate merges the two branches into a descriptor `v`, the forget
//! gate turns `X'` into per-channel decay factors `f`.

use serde::Serialize;

use crate::context::{Context, ExecOptions};
use crate::error::{Error, Result};
use crate::gates::{forget_gate, update_gate, ForgetGateConfig, UpdateGateConfig};
use crate::kernels::conv::ConvSpec;
use crate::params::{ParamLayout, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmgConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub alpha: f64,
    pub groups: usize,
    pub stride: usize,
    pub ru: usize,
    pub rf: usize,
}

impl SmgConfig {
    /// Hybrid-block module: `g=4, alpha=4, r=2`, stride 1.
    pub fn hybrid(in_channels: usize, growth: usize) -> Self {
        SmgConfig {
            in_channels,
            out_channels: growth,
            alpha: 4.0,
            groups: 4,
            stride: 1,
            ru: 2,
            rf: 2,
        }
    }

    /// Transition module: `g=1, alpha=1.5, r=4`, stride 2, `C = floor(theta*C~)`.
    pub fn transition(in_channels: usize, theta: f64) -> Self {
        SmgConfig {
            in_channels,
            out_channels: (theta * in_channels as f64).floor() as usize,
            alpha: 1.5,
            groups: 1,
            stride: 2,
            ru: 4,
            rf: 4,
        }
    }

    /// Width of the expanded squeeze map, `floor(alpha * C)`.
    pub fn mid(&self) -> usize {
        (self.alpha * self.out_channels as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (c, g) = (self.out_channels, self.groups);
        if self.in_channels == 0 || c == 0 {
            return bad(format!("channel counts must be positive, got {} -> {c}", self.in_channels));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if g == 0 || self.ru == 0 || self.rf == 0 {
            return bad("groups and reduction ratios must be positive".into());
        }
        if !matches!(self.stride, 1 | 2) {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if c < g {
            return bad(format!("{c} output channels cannot be split into {g} groups"));
        }
        let mid = self.mid();
        if mid == 0 {
            return bad(format!("alpha {} leaves no squeeze channels for C={c}", self.alpha));
        }
        if mid % g != 0 || c % g != 0 {
            return bad(format!("group conv {mid} -> {c} is not divisible by {g} groups"));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "module expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        if self.stride == 2 && (input.h % 2 != 0 || input.w % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "stride-2 module needs even spatial dims, got {input}"
            )));
        }
        let (h, w) = self.gconv_spec().output_hw(input.h, input.w)?;
        Ok(Shape { n: input.n, c: self.out_channels, h, w })
    }

    pub fn conv1_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.mid(), 1)
    }

    pub fn gconv_spec(&self) -> ConvSpec {
        ConvSpec::new(self.mid(), self.out_channels, 3)
            .stride(self.stride)
            .padding(1)
            .groups(self.groups)
    }

    pub fn dw33_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.out_channels, 3).padding(1)
    }

    pub fn dw55_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.out_channels, 3).padding(2).dilation(2)
    }

    pub fn update_config(&self) -> UpdateGateConfig {
        UpdateGateConfig {
            channels: self.out_channels,
            reduction: self.ru,
        }
    }

    pub fn forget_config(&self) -> ForgetGateConfig {
        ForgetGateConfig {
            channels: self.out_channels,
            reduction: self.rf,
        }
    }

    pub fn layout(&self, prefix: &str) -> ParamLayout {
        let (ci, mid, c) = (self.in_channels, self.mid(), self.out_channels);
        let mut l = ParamLayout::new();
        l.batch_norm(&format!("{prefix}.squeeze.bn1"), ci);
        l.conv(&format!("{prefix}.squeeze.conv1"), &self.conv1_spec());
        l.batch_norm(&format!("{prefix}.squeeze.bn2"), mid);
        l.conv(&format!("{prefix}.squeeze.gconv"), &self.gconv_spec());
        l.batch_norm(&format!("{prefix}.excite.bn33"), c);
        l.conv(&format!("{prefix}.excite.dw33"), &self.dw33_spec());
        l.batch_norm(&format!("{prefix}.excite.bn55"), c);
        l.conv(&format!("{prefix}.excite.dw55"), &self.dw55_spec());
        l.extend(self.update_config().layout(&format!("{prefix}.update")));
        l.extend(self.forget_config().layout(&format!("{prefix}.forget")));
        l
    }

    /// Learnable scalars, counted without building a layout.
    pub fn param_count(&self) -> usize {
        let (ci, mid, c, g) = (self.in_channels, self.mid(), self.out_channels, self.groups);
        let squeeze = 2 * ci + ci * mid + 2 * mid + (mid / g) * c * 9;
        let excite = 2 * (2 * c + 9 * c);
        squeeze + excite + self.update_config().param_count() + self.forget_config().param_count()
    }
}

/// `X'`, the squeezed (and possibly down-sampled) map.
pub fn squeeze_cell<T: Real>(cx: &mut Context<'_, T>, prefix: &str, cfg: &SmgConfig, x: Var) -> Result<Var> {
    cfg.output_shape(cx.tape.shape(x)?)?;
    let expanded = cx.preact_conv(
        x,
        &format!("{prefix}.squeeze.bn1"),
        &format!("{prefix}.squeeze.conv1"),
        cfg.conv1_spec(),
    )?;
    let out = cx.preact_conv(
        expanded,
        &format!("{prefix}.squeeze.bn2"),
        &format!("{prefix}.squeeze.gconv"),
        cfg.gconv_spec(),
    )?;
    cx.release(expanded);
    Ok(out)
}

/// `(X33, X55)`, both shaped like `X'`.
pub fn multiscale_excitation<T: Real>(
    cx: &mut Context<'_, T>,
    prefix: &str,
    cfg: &SmgConfig,
    xp: Var,
) -> Result<(Var, Var)> {
    let x33 = cx.preact_conv(
        xp,
        &format!("{prefix}.excite.bn33"),
        &format!("{prefix}.excite.dw33"),
        cfg.dw33_spec(),
    )?;
    let x55 = cx.preact_conv(
        xp,
        &format!("{prefix}.excite.bn55"),
        &format!("{prefix}.excite.dw55"),
        cfg.dw55_spec(),
    )?;
    Ok((x33, x55))
}

/// Handles produced by [`smg_forward`]. On an inference tape every field but
/// `out` has already been released.
#[derive(Clone, Copy, Debug)]
pub struct SmgOutput {
    pub out: Var,
    pub x_prime: Var,
    pub x33: Var,
    pub x55: Var,
    pub v: Var,
    pub f: Var,
}

pub fn smg_forward<T: Real>(cx: &mut Context<'_, T>, prefix: &str, cfg: &SmgConfig, x: Var) -> Result<SmgOutput> {
    let xp = squeeze_cell(cx, prefix, cfg, x)?;
    let (x33, x55) = multiscale_excitation(cx, prefix, cfg, xp)?;
    let upd = update_gate(cx, &format!("{prefix}.update"), &cfg.update_config(), x33, x55)?;
    for t in [x33, x55, upd.z33, upd.z55, upd.u33, upd.u55] {
        cx.release(t);
    }
    let fg = forget_gate(cx, &format!("{prefix}.forget"), &cfg.forget_config(), xp)?;
    cx.release(fg.z);
    let decayed = cx.tape.mul(fg.f, xp)?;
    let out = cx.tape.add(decayed, upd.v)?;
    for t in [decayed, xp, upd.v, fg.f] {
        cx.release(t);
    }
    Ok(SmgOutput {
        out,
        x_prime: xp,
        x33,
        x55,
        v: upd.v,
        f: fg.f,
    })
}

/// One standalone module with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SmgParams<T> {
    pub config: SmgConfig,
    pub store: ParamStore<T>,
}

/// Parameter prefix used by [`SmgParams`].
pub const SMG_PREFIX: &str = "smg";

impl<T: Real> SmgParams<T> {
    pub fn init(config: SmgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::init(&config.layout(SMG_PREFIX), seed);
        Ok(SmgParams { config, store })
    }

    pub fn forward(&self, x: &Tensor<T>, options: ExecOptions) -> Result<Tensor<T>> {
        let mut cx = Context::new(&self.store, options, false);
        let input = cx.input(x.clone());
        let out = smg_forward(&mut cx, SMG_PREFIX, &self.config, input)?;
        cx.value(out.out).cloned()
    }
}
