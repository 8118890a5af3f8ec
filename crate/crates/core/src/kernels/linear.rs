//! Fully connected layers on `(N, C, 1, 1)` descriptors, and the classification loss.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Weight shape of a `c_in -> c_out` layer, stored as `(c_out, c_in, 1, 1)`.
pub fn fc_weight_shape(c_in: usize, c_out: usize) -> Shape {
    Shape {
        n: c_out,
        c: c_in,
        h: 1,
        w: 1,
    }
}

pub fn fc_param_count(c_in: usize, c_out: usize, bias: bool) -> usize {
    c_in * c_out + if bias { c_out } else { 0 }
}

fn check<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Shape> {
    let s = x.shape();
    let ws = weight.shape();
    if !s.is_descriptor() || !ws.is_descriptor() || ws.c != s.c {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            lhs: s,
            rhs: ws,
        });
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::InvalidArgument(format!(
                "bias of length {} for {} outputs",
                b.len(),
                ws.n
            )));
        }
    }
    Shape::descriptor(s.n, ws.n)
}

pub fn fully_connected<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let out_shape = check(x, weight, bias)?;
    let (c_in, c_out) = (x.shape().c, out_shape.c);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..x.shape().n {
        let xin = &x.data()[n * c_in..(n + 1) * c_in];
        for o in 0..c_out {
            let row = &weight.data()[o * c_in..(o + 1) * c_in];
            let mut acc = bias.map_or(T::zero(), |b| b[o]);
            for (a, b) in row.iter().zip(xin) {
                acc += *a * *b;
            }
            out.data_mut()[n * c_out + o] = acc;
        }
    }
    Ok(out)
}

pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn fully_connected_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> FcGrads<T> {
    let (batch, c_in, c_out) = (x.shape().n, x.shape().c, weight.shape().n);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); c_out];
    for n in 0..batch {
        let xin = &x.data()[n * c_in..(n + 1) * c_in];
        for o in 0..c_out {
            let g = grad_out.data()[n * c_out + o];
            db[o] += g;
            for i in 0..c_in {
                dw.data_mut()[o * c_in + i] += g * xin[i];
                dx.data_mut()[n * c_in + i] += g * weight.data()[o * c_in + i];
            }
        }
    }
    FcGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Mean cross-entropy of `(N, K, 1, 1)` logits against class labels.
///
/// Returns the scalar loss and the softmax probabilities, which are what the
/// backward pass needs.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if !s.is_descriptor() || labels.len() != s.n {
        return Err(Error::InvalidArgument(format!(
            "cross entropy needs (N, K, 1, 1) logits and N labels; got {s} and {} labels",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", s.c)));
    }
    let mut probs = Tensor::zeros(s);
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * s.c..(n + 1) * s.c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        for (k, v) in row.iter().enumerate() {
            probs.data_mut()[n * s.c + k] = T::lit((v.as_f64() - max).exp() / sum);
        }
        loss += sum.ln() + max - row[label].as_f64();
    }
    Ok((T::lit(loss / s.n as f64), probs))
}

pub fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[usize], grad: T) -> Tensor<T> {
    let s = probs.shape();
    let scale = grad / T::lit(s.n as f64);
    let mut dx = probs.clone();
    for (n, &label) in labels.iter().enumerate() {
        dx.data_mut()[n * s.c + label] -= T::one();
    }
    dx.data_mut().iter_mut().for_each(|v| *v *= scale);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn identity_weight() {
        let mut rng = seeded_rng(8);
        let x = Tensor::<f64>::randn(Shape::descriptor(3, 4).unwrap(), 1.0, &mut rng);
        let mut w = Tensor::zeros(fc_weight_shape(4, 4));
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        assert_eq!(fully_connected(&x, &w, Some(&[0.0; 4])).unwrap(), x);
    }

    #[test]
    fn param_count_with_bias() {
        assert_eq!(fc_param_count(10, 5, true), 55);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::descriptor(1, 3).unwrap());
        let w = Tensor::zeros(fc_weight_shape(4, 2));
        assert!(fully_connected(&x, &w, None).is_err());
        let w = Tensor::zeros(fc_weight_shape(3, 2));
        assert!(fully_connected(&x, &w, Some(&[0.0; 3])).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(Shape::descriptor(2, 10).unwrap());
        let (loss, _) = cross_entropy(&logits, &[3, 7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&logits, &[3, 10]).is_err());
    }
}
