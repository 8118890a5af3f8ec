//! Max pooling, global average pooling and attention-weighted global pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    /// The stem pool: 3x3 window, stride 2, padding 1.
    pub const MAX3X3_S2: PoolSpec = PoolSpec {
        kernel: 3,
        stride: 2,
        padding: 1,
    };

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return Err(Error::InvalidShape(format!(
                "{h}x{w} input is smaller than the {k}x{k} pooling window",
                k = self.kernel
            )));
        }
        Ok((
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Shape::new(input.n, input.c, oh, ow)
    }
}

/// Returns the pooled tensor and, per output element, the flat input index of the maximum.
pub fn max_pool<T: Real>(x: &Tensor<T>, spec: PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let out_shape = spec.output_shape(s)?;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let (st, pd) = (spec.stride as isize, spec.padding as isize);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..spec.kernel as isize {
                        let iy = oy as isize * st + ky - pd;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel as isize {
                            let ix = ox as isize * st + kx - pd;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * s.w + ix as usize;
                            if x.data()[i] > best || best_i == usize::MAX {
                                best = x.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    *out.at_mut(n, c, oy, ox) = best;
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_backward<T: Real>(input: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// `(N, C, H, W) -> (N, C, 1, 1)` arithmetic mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane() as f64;
    let data = (0..s.n)
        .flat_map(|n| (0..s.c).map(move |c| (n, c)))
        .map(|(n, c)| T::lit(x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>() / p))
        .collect();
    Tensor::from_vec(Shape { h: 1, w: 1, ..s }, data).expect("descriptor shape")
}

pub fn global_avg_pool_backward<T: Real>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let scale = T::lit(1.0 / input.plane() as f64);
    let mut dx = Tensor::zeros(input);
    let p = input.plane();
    for (k, &g) in grad_out.data().iter().enumerate() {
        dx.data_mut()[k * p..(k + 1) * p]
            .iter_mut()
            .for_each(|v| *v = g * scale);
    }
    dx
}

/// `z[n, c] = sum_{y,x} x[n, c, y, x] * weights[n, 0, y, x]` with a one-channel weight map.
pub fn attention_pool<T: Real>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let ws = weights.shape();
    if ws.c != 1 || ws.n != s.n || ws.h != s.h || ws.w != s.w {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            lhs: s,
            rhs: ws,
        });
    }
    let mut data = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        let wp = weights.plane(n, 0);
        for c in 0..s.c {
            let acc: f64 = x
                .plane(n, c)
                .iter()
                .zip(wp)
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            data.push(T::lit(acc));
        }
    }
    Tensor::from_vec(Shape { h: 1, w: 1, ..s }, data)
}

pub fn attention_pool_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(weights.shape());
    let p = s.plane();
    for n in 0..s.n {
        let wp = weights.plane(n, 0).to_vec();
        let mut dwp = vec![0.0f64; p];
        for c in 0..s.c {
            let g = grad_out.data()[n * s.c + c];
            let start = (n * s.c + c) * p;
            for i in 0..p {
                dx.data_mut()[start + i] = g * wp[i];
                dwp[i] += (g * x.data()[start + i]).as_f64();
            }
        }
        for (d, v) in dw.data_mut()[n * p..(n + 1) * p].iter_mut().zip(dwp) {
            *d = T::lit(v);
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn stem_pool_halves() {
        let s = Shape::new(1, 2, 112, 112).unwrap();
        assert_eq!(PoolSpec::MAX3X3_S2.output_shape(s).unwrap(), Shape::new(1, 2, 56, 56).unwrap());
        assert!(PoolSpec::MAX3X3_S2.output_shape(Shape::new(1, 1, 2, 2).unwrap()).is_err());
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 3, 3).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 9.0, 6.0, 7.0, 8.0, 5.0],
        )
        .unwrap();
        let (y, arg) = max_pool(&x, PoolSpec::MAX3X3_S2).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0, 9.0, 9.0]);
        assert!(arg.iter().all(|&i| i == 4));
    }

    #[test]
    fn global_avg_of_constant() {
        let x = Tensor::<f32>::full(Shape::new(2, 3, 4, 4).unwrap(), 1.25);
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), Shape::descriptor(2, 3).unwrap());
        assert!(y.data().iter().all(|v| *v == 1.25));
    }

    #[test]
    fn uniform_attention_is_mean() {
        let mut rng = seeded_rng(4);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5).unwrap(), 1.0, &mut rng);
        let w = Tensor::full(Shape::new(2, 1, 4, 5).unwrap(), 1.0 / 20.0);
        let z = attention_pool(&x, &w).unwrap();
        assert!(z.max_abs_diff(&global_avg_pool(&x)) < 1e-14);
    }
}
