//! Helpers shared by integration tests.

use hcgnet::kernels::conv::ConvSpec;
use hcgnet::tensor::Tensor;

/// Plain nested loops over flat buffers, written from the output-size formula.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Vec<f64> {
    let s = x.shape();
    let (kh, kw) = spec.kernel;
    let eff_h = spec.dilation * (kh - 1) + 1;
    let eff_w = spec.dilation * (kw - 1) + 1;
    let oh = (s.h + 2 * spec.padding - eff_h) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding - eff_w) / spec.stride + 1;
    let cig = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; s.n * spec.out_channels * oh * ow];
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..cig {
                        let c = (o / cog) * cig + i;
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (y * spec.stride + a * spec.dilation) as i64 - spec.padding as i64;
                                let ix = (xo * spec.stride + b * spec.dilation) as i64 - spec.padding as i64;
                                if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                                    continue;
                                }
                                let xi = ((n * s.c + c) * s.h + iy as usize) * s.w + ix as usize;
                                let wi = ((o * cig + i) * kh + a) * kw + b;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    out[((n * spec.out_channels + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}
