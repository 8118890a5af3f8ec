//! Softmax jointly over any subset of `{channel, height, width, branch}`.
//!
//! The branch axis spans a list of equally shaped tensors, so a two-branch
//! softmax over logits `a` and `b` normalizes every `(n, c, h, w)` pair
//! `(a[i], b[i])`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Channel,
    Height,
    Width,
    Branch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisSet {
    pub channel: bool,
    pub height: bool,
    pub width: bool,
    pub branch: bool,
}

impl AxisSet {
    pub fn of(axes: &[Axis]) -> Self {
        let mut set = AxisSet::default();
        for a in axes {
            match a {
                Axis::Channel => set.channel = true,
                Axis::Height => set.height = true,
                Axis::Width => set.width = true,
                Axis::Branch => set.branch = true,
            }
        }
        set
    }

    pub fn spatial() -> Self {
        AxisSet::of(&[Axis::Height, Axis::Width])
    }

    pub fn branch() -> Self {
        AxisSet::of(&[Axis::Branch])
    }

    pub fn is_empty(&self) -> bool {
        !(self.channel || self.height || self.width || self.branch)
    }

    /// Index of the normalization group an element belongs to (within one branch).
    #[inline]
    fn group_of(&self, s: Shape, n: usize, c: usize, h: usize, w: usize) -> usize {
        let (gc, gh, gw) = self.group_dims(s);
        let c = if self.channel { 0 } else { c };
        let h = if self.height { 0 } else { h };
        let w = if self.width { 0 } else { w };
        ((n * gc + c) * gh + h) * gw + w
    }

    fn group_dims(&self, s: Shape) -> (usize, usize, usize) {
        (
            if self.channel { 1 } else { s.c },
            if self.height { 1 } else { s.h },
            if self.width { 1 } else { s.w },
        )
    }

    fn group_count(&self, s: Shape) -> usize {
        let (gc, gh, gw) = self.group_dims(s);
        s.n * gc * gh * gw
    }
}

impl fmt::Display for AxisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.channel, "channel"),
            (self.height, "height"),
            (self.width, "width"),
            (self.branch, "branch"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

fn check<T: Real>(inputs: &[&Tensor<T>], axes: AxisSet) -> Result<Shape> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument("softmax needs at least one axis".into()));
    }
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("softmax over an empty input list".into()))?
        .shape();
    if let Some(t) = inputs.iter().find(|t| t.shape() != first) {
        return Err(Error::ShapeMismatch {
            op: "softmax branches",
            lhs: first,
            rhs: t.shape(),
        });
    }
    if !axes.branch && inputs.len() != 1 {
        return Err(Error::InvalidArgument(
            "several inputs given but the branch axis is not normalized".into(),
        ));
    }
    Ok(first)
}

/// Visits every element with its group index and flat offset.
fn for_each_element(s: Shape, axes: AxisSet, mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    f(axes.group_of(s, n, c, h, w), i);
                    i += 1;
                }
            }
        }
    }
}

pub fn softmax_over<T: Real>(inputs: &[&Tensor<T>], axes: AxisSet) -> Result<Vec<Tensor<T>>> {
    let s = check(inputs, axes)?;
    let groups = axes.group_count(s);
    let mut max = vec![f64::NEG_INFINITY; groups];
    for t in inputs {
        for_each_element(s, axes, |g, i| max[g] = max[g].max(t.data()[i].as_f64()));
    }
    // sums in f64 keep single-precision outputs normalized to ~1e-7
    let mut sum = vec![0.0f64; groups];
    let mut exps: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut e = vec![0.0; s.numel()];
        for_each_element(s, axes, |g, i| {
            e[i] = (t.data()[i].as_f64() - max[g]).exp();
            sum[g] += e[i];
        });
        exps.push(e);
    }
    Ok(exps
        .into_iter()
        .map(|e| {
            let mut out = Tensor::zeros(s);
            for_each_element(s, axes, |g, i| out.data_mut()[i] = T::lit(e[i] / sum[g]));
            out
        })
        .collect())
}

/// `dx = y * (g - sum_group(g * y))`
pub fn softmax_backward<T: Real>(
    outputs: &[&Tensor<T>],
    grads: &[&Tensor<T>],
    axes: AxisSet,
) -> Result<Vec<Tensor<T>>> {
    let s = check(outputs, axes)?;
    let groups = axes.group_count(s);
    let mut dot = vec![0.0f64; groups];
    for (y, g) in outputs.iter().zip(grads) {
        for_each_element(s, axes, |k, i| {
            dot[k] += y.data()[i].as_f64() * g.data()[i].as_f64()
        });
    }
    Ok(outputs
        .iter()
        .zip(grads)
        .map(|(y, g)| {
            let mut dx = Tensor::zeros(s);
            for_each_element(s, axes, |k, i| {
                let yi = y.data()[i].as_f64();
                dx.data_mut()[i] = T::lit(yi * (g.data()[i].as_f64() - dot[k]));
            });
            dx
        })
        .collect())
}
