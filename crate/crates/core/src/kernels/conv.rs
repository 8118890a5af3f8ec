//! Grouped, strided, dilated 2-D convolution.
//!
//! Two forward paths are provided: [`conv2d_direct`] walks the seven nested
//! loops literally, and [`conv2d`] lowers each `(image, group)` pair to an
//! image-to-column matrix and a GEMM. Backward always goes through the
//! column form.

use serde::{Deserialize, Serialize};

use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square `k x k` kernel, stride 1, no padding, no dilation, one group, no bias.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    /// `channels -> channels` with one group per channel.
    pub fn depthwise(channels: usize, k: usize) -> Self {
        ConvSpec::new(channels, channels, k).groups(channels)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            stride,
            dilation,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidConv(format!(
                "channels and kernel extents must be positive: {self:?}"
            )));
        }
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::InvalidConv(format!(
                "stride, dilation and groups must be positive: {self:?}"
            )));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidConv(format!(
                "channels {in_channels}->{out_channels} not divisible by {groups} groups"
            )));
        }
        Ok(())
    }

    /// `floor((h + 2p - d(k-1) - 1) / s) + 1` per spatial axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        if h + 2 * self.padding < span_h || w + 2 * self.padding < span_w {
            return Err(Error::InvalidConv(format!(
                "input {h}x{w} with padding {} is smaller than the dilated kernel {span_h}x{span_w}",
                self.padding
            )));
        }
        Ok((
            (h + 2 * self.padding - span_h) / self.stride + 1,
            (w + 2 * self.padding - span_w) / self.stride + 1,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::InvalidConv(format!(
                "input has {} channels, convolution expects {}",
                input.c, self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Shape::new(input.n, self.out_channels, oh, ow)
    }

    /// `(out_channels, in_channels / groups, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: self.in_channels / self.groups,
            h: self.kernel.0,
            w: self.kernel.1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one image with the given output extent.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w) as u64
            * self.out_channels as u64
            * (self.in_channels / self.groups) as u64
            * (self.kernel.0 * self.kernel.1) as u64
    }

    fn check_operands<T: Real>(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&[T]>,
    ) -> Result<Shape> {
        let out = self.output_shape(input.shape())?;
        if weight.shape() != self.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                lhs: weight.shape(),
                rhs: self.weight_shape(),
            });
        }
        match (self.bias, bias) {
            (true, Some(b)) if b.len() == self.out_channels => {}
            (false, None) => {}
            (true, _) => {
                return Err(Error::InvalidConv(format!(
                    "expected a bias of length {}",
                    self.out_channels
                )))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidConv(
                    "bias supplied to a convolution without bias".into(),
                ))
            }
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// Literal direct convolution.
pub fn conv2d_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = spec.check_operands(input, weight, bias)?;
    let ins = input.shape();
    let (kh, kw) = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..ins.n {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = bias.map_or(T::zero(), |b| b[oc]);
                    for ic in 0..cin_g {
                        let c = g * cin_g + ic;
                        for ky in 0..kh {
                            let iy = oy as isize * s + ky as isize * d - p;
                            if iy < 0 || iy >= ins.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox as isize * s + kx as isize * d - p;
                                if ix < 0 || ix >= ins.w as isize {
                                    continue;
                                }
                                acc += input.at(n, c, iy as usize, ix as usize)
                                    * weight.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(n, oc, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Convolution through image-to-column lowering.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = spec.check_operands(input, weight, bias)?;
    let ins = input.shape();
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = cin_g * spec.kernel.0 * spec.kernel.1;
    let positions = out_shape.plane();
    let in_plane = ins.plane();
    let mut out = Tensor::zeros(out_shape);
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * positions]
    };
    let wdata = weight.data();
    for n in 0..ins.n {
        for g in 0..spec.groups {
            let in_start = (n * ins.c + g * cin_g) * in_plane;
            let group_in = &input.data()[in_start..in_start + cin_g * in_plane];
            let col_mat: &[T] = if spec.is_pointwise() {
                group_in
            } else {
                im2col(group_in, cin_g, ins.h, ins.w, spec, out_shape.h, out_shape.w, &mut cols);
                &cols
            };
            let w_g = &wdata[g * cout_g * k..(g + 1) * cout_g * k];
            let out_start = (n * out_shape.c + g * cout_g) * positions;
            let out_g = &mut out.data_mut()[out_start..out_start + cout_g * positions];
            gemm::matmul_acc(cout_g, positions, k, w_g, col_mat, out_g);
        }
    }
    if let Some(b) = bias {
        for n in 0..out_shape.n {
            for oc in 0..out_shape.c {
                let start = (n * out_shape.c + oc) * positions;
                for v in &mut out.data_mut()[start..start + positions] {
                    *v += b[oc];
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            lhs: grad_out.shape(),
            rhs: out_shape,
        });
    }
    let ins = input.shape();
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = cin_g * spec.kernel.0 * spec.kernel.1;
    let positions = out_shape.plane();
    let in_plane = ins.plane();
    let mut grad_in = Tensor::zeros(ins);
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut cols = vec![T::zero(); k * positions];
    let mut dcols = vec![T::zero(); k * positions];
    for n in 0..ins.n {
        for g in 0..spec.groups {
            let in_start = (n * ins.c + g * cin_g) * in_plane;
            let group_in = &input.data()[in_start..in_start + cin_g * in_plane];
            im2col(group_in, cin_g, ins.h, ins.w, spec, out_shape.h, out_shape.w, &mut cols);
            let out_start = (n * out_shape.c + g * cout_g) * positions;
            let dy = &grad_out.data()[out_start..out_start + cout_g * positions];

            let dw_g = &mut grad_w.data_mut()[g * cout_g * k..(g + 1) * cout_g * k];
            gemm::matmul_a_bt_acc(cout_g, k, positions, dy, &cols, dw_g);

            let w_g = &weight.data()[g * cout_g * k..(g + 1) * cout_g * k];
            dcols.iter_mut().for_each(|v| *v = T::zero());
            gemm::matmul_at_b_acc(k, positions, cout_g, w_g, dy, &mut dcols);
            let dx = &mut grad_in.data_mut()[in_start..in_start + cin_g * in_plane];
            col2im(&dcols, cin_g, ins.h, ins.w, spec, out_shape.h, out_shape.w, dx);
        }
    }
    let grad_b = spec.bias.then(|| {
        (0..spec.out_channels)
            .map(|oc| {
                (0..out_shape.n)
                    .map(|n| grad_out.plane(n, oc).iter().copied().sum::<T>())
                    .sum()
            })
            .collect()
    });
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let positions = oh * ow;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - p;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize * d - p;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let positions = oh * ow;
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize * d - p;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn output_arithmetic() {
        let spec = ConvSpec::depthwise(8, 3).dilation(2).padding(2);
        assert_eq!(spec.output_hw(14, 14).unwrap(), (14, 14));
        let spec = ConvSpec::new(4, 4, 3).stride(2).padding(1);
        assert_eq!(spec.output_hw(56, 56).unwrap(), (28, 28));
        assert_eq!(spec.output_hw(7, 7).unwrap(), (4, 4));
    }

    #[test]
    fn rejects_bad_groups_and_tiny_inputs() {
        assert!(ConvSpec::new(6, 4, 3).groups(4).validate().is_err());
        assert!(ConvSpec::new(8, 4, 3).groups(4).validate().is_ok());
        assert!(ConvSpec::new(1, 1, 5).output_hw(3, 3).is_err());
    }

    #[test]
    fn identity_kernel() {
        let mut rng = seeded_rng(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 1, 5, 4).unwrap(), 1.0, &mut rng);
        let w = Tensor::ones(Shape::new(1, 1, 1, 1).unwrap());
        let spec = ConvSpec::new(1, 1, 1);
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
        assert_eq!(conv2d_direct(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn paths_agree_with_bias() {
        let mut rng = seeded_rng(3);
        let spec = ConvSpec::new(4, 6, 3).stride(2).padding(1).groups(2).with_bias(true);
        let x = Tensor::<f64>::randn(Shape::new(2, 4, 7, 6).unwrap(), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let b: Vec<f64> = (0..6).map(|i| i as f64 * 0.25).collect();
        let a = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let d = conv2d_direct(&x, &w, Some(&b), &spec).unwrap();
        assert!(a.max_abs_diff(&d) < 1e-12);
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let spec = ConvSpec::new(3, 2, 1);
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2).unwrap());
        let w = Tensor::zeros(spec.weight_shape());
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }
}
