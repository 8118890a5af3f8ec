//! Channel concatenation and broadcast-aware elementwise arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Mul,
}

/// How the two operands of a binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// The left operand is a `(n|1, c, 1, 1)` descriptor.
    Lhs,
    /// The right operand is a `(n|1, c, 1, 1)` descriptor.
    Rhs,
}

fn descriptor_fits(desc: Shape, full: Shape) -> bool {
    desc.is_descriptor() && desc.c == full.c && (desc.n == full.n || desc.n == 1)
}

pub fn broadcast_rule(lhs: Shape, rhs: Shape, op: &'static str) -> Result<(Shape, Broadcast)> {
    if lhs == rhs {
        Ok((lhs, Broadcast::Same))
    } else if descriptor_fits(rhs, lhs) {
        Ok((lhs, Broadcast::Rhs))
    } else if descriptor_fits(lhs, rhs) {
        Ok((rhs, Broadcast::Lhs))
    } else {
        Err(Error::ShapeMismatch { op, lhs, rhs })
    }
}

/// Value of a descriptor at `(n, c)`, honoring batch broadcast.
#[inline]
fn desc_at<T: Real>(d: &Tensor<T>, n: usize, c: usize) -> T {
    let s = d.shape();
    d.data()[(if s.n == 1 { 0 } else { n }) * s.c + c]
}

/// Applies `f(full_value, desc_value)` plane by plane.
fn zip_broadcast<T: Real>(
    full: &Tensor<T>,
    desc: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let s = full.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let d = desc_at(desc, n, c);
            let start = (n * s.c + c) * p;
            for i in start..start + p {
                out.data_mut()[i] = f(full.data()[i], d);
            }
        }
    }
    out
}

pub fn binary<T: Real>(op: BinaryOp, lhs: &Tensor<T>, rhs: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Mul => "broadcast_mul",
    };
    let (_, mode) = broadcast_rule(lhs.shape(), rhs.shape(), name)?;
    let f = move |a: T, b: T| match op {
        BinaryOp::Add => a + b,
        BinaryOp::Mul => a * b,
    };
    Ok(match mode {
        Broadcast::Same => {
            let data = lhs.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::from_vec(lhs.shape(), data)?
        }
        Broadcast::Rhs => zip_broadcast(lhs, rhs, f),
        Broadcast::Lhs => zip_broadcast(rhs, lhs, move |full, d| f(d, full)),
    })
}

/// Sums a full-shape gradient down to a descriptor shape.
pub fn reduce_to_descriptor<T: Real>(grad: &Tensor<T>, desc: Shape) -> Tensor<T> {
    let s = grad.shape();
    let mut acc = vec![0.0f64; desc.numel()];
    for n in 0..s.n {
        let dn = if desc.n == 1 { 0 } else { n };
        for c in 0..s.c {
            acc[dn * s.c + c] += grad.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Tensor::from_vec(desc, acc.into_iter().map(T::lit).collect()).expect("descriptor shape")
}

pub fn binary_backward<T: Real>(
    op: BinaryOp,
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, mode) = broadcast_rule(lhs.shape(), rhs.shape(), "binary backward")?;
    // gradient of each operand before reduction to its own shape
    let (gl_full, gr_full) = match op {
        BinaryOp::Add => (grad_out.clone(), grad_out.clone()),
        BinaryOp::Mul => (
            binary(BinaryOp::Mul, grad_out, rhs)?,
            binary(BinaryOp::Mul, grad_out, lhs)?,
        ),
    };
    Ok(match mode {
        Broadcast::Same => (gl_full, gr_full),
        Broadcast::Rhs => (gl_full, reduce_to_descriptor(&gr_full, rhs.shape())),
        Broadcast::Lhs => (reduce_to_descriptor(&gl_full, lhs.shape()), gr_full),
    })
}

pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of an empty list".into()))?
        .shape();
    for t in inputs {
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first,
                rhs: s,
            });
        }
    }
    let channels = inputs.iter().map(|t| t.shape().c).sum();
    let out_shape = first.with_channels(channels);
    let p = first.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            let c = t.shape().c;
            data.extend_from_slice(&t.data()[n * c * p..(n + 1) * c * p]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a concatenated gradient back into the input channel counts.
pub fn split_channels<T: Real>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let t = grad.slice_channels(start, start + c);
            start += c;
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn concat_preserves_order() {
        let mut rng = seeded_rng(0);
        let a = Tensor::<f32>::randn(Shape::new(1, 3, 4, 4).unwrap(), 1.0, &mut rng);
        let b = Tensor::<f32>::randn(Shape::new(1, 5, 4, 4).unwrap(), 1.0, &mut rng);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 8, 4, 4).unwrap());
        assert_eq!(c.slice_channels(0, 3).unwrap(), a);
        assert_eq!(c.slice_channels(3, 8).unwrap(), b);
    }

    #[test]
    fn add_zero_and_mul_ones_are_identities() {
        let mut rng = seeded_rng(1);
        let s = Shape::new(2, 3, 4, 5).unwrap();
        let x = Tensor::<f64>::randn(s, 1.0, &mut rng);
        assert_eq!(binary(BinaryOp::Add, &x, &Tensor::zeros(s)).unwrap(), x);
        let ones = Tensor::ones(Shape::descriptor(2, 3).unwrap());
        assert_eq!(binary(BinaryOp::Mul, &x, &ones).unwrap(), x);
        assert_eq!(binary(BinaryOp::Mul, &ones, &x).unwrap(), x);
    }

    #[test]
    fn descriptor_broadcast_adds_per_channel() {
        let x = Tensor::<f64>::zeros(Shape::new(2, 2, 2, 2).unwrap());
        let d = Tensor::from_vec(Shape::descriptor(1, 2).unwrap(), vec![1.0, -1.0]).unwrap();
        let y = binary(BinaryOp::Add, &x, &d).unwrap();
        assert_eq!(y.at(1, 0, 1, 1), 1.0);
        assert_eq!(y.at(0, 1, 0, 1), -1.0);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3).unwrap());
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3).unwrap());
        assert!(binary(BinaryOp::Add, &a, &b).is_err());
        let c = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 3).unwrap());
        assert!(concat_channels(&[&a, &c]).is_err());
    }
}
