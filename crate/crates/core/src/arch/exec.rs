//! Node-by-node execution of a [`ModelGraph`].

use std::collections::HashMap;

use super::graph::{ModelGraph, NodeKind, INPUT_CHANNELS};
use crate::context::{Context, ExecOptions};
use crate::error::{Error, Result};
use crate::kernels::softmax::{Axis, AxisSet};
use crate::params::ParamStore;
use crate::smg::smg_forward;
use crate::tape::Var;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub exec: ExecOptions,
    /// Return class probabilities instead of logits.
    pub softmax: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            exec: ExecOptions::inference(),
            softmax: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// `(N, classes, 1, 1)` logits.
    pub logits: Var,
    /// Output shape of every node, in node order.
    pub shapes: Vec<Shape>,
}

/// Rejects inputs other than `(N, 3, input, input)`.
pub fn check_input(model: &ModelGraph, shape: Shape) -> Result<()> {
    let r = model.config().input;
    if shape.c != INPUT_CHANNELS || shape.h != r || shape.w != r {
        return Err(Error::InvalidArgument(format!(
            "model `{}` expects (N, {INPUT_CHANNELS}, {r}, {r}) input, got {shape}",
            model.config().name
        )));
    }
    Ok(())
}

/// Runs every node on `x`. Values nobody needs any more are released
/// (a no-op on a recording tape).
pub fn forward_on<T: Real>(cx: &mut Context<'_, T>, model: &ModelGraph, x: Var) -> Result<ForwardResult> {
    check_input(model, cx.tape.shape(x)?)?;
    let nodes = model.nodes();
    let mut consumers = vec![0usize; nodes.len()];
    for &(src, _) in model.edges() {
        consumers[src] += 1;
    }
    let mut vars: Vec<Var> = Vec::with_capacity(nodes.len());
    let mut shapes = Vec::with_capacity(nodes.len());
    let mut uses: HashMap<Var, usize> = HashMap::new();
    for node in nodes {
        let ins: Vec<Var> = node.inputs.iter().map(|&i| vars[i]).collect();
        let name = node.name.as_str();
        let out = match node.kind {
            NodeKind::Input { .. } => x,
            NodeKind::Conv { spec } => cx.conv(ins[0], name, spec)?,
            NodeKind::BatchNorm { .. } => cx.batch_norm(ins[0], name)?,
            NodeKind::Relu => cx.tape.relu(ins[0])?,
            NodeKind::MaxPool { spec } => cx.tape.max_pool(ins[0], spec)?,
            NodeKind::Smg { config } => smg_forward(cx, name, &config, ins[0]).map_err(|e| e.at(name))?.out,
            NodeKind::Concat => cx.tape.concat(&ins)?,
            NodeKind::GlobalAvgPool => cx.tape.global_avg_pool(ins[0])?,
            NodeKind::Dropout { rate } => {
                if cx.options.dropout {
                    let Context { tape, rng, .. } = cx;
                    tape.dropout(ins[0], rate, rng)?
                } else {
                    ins[0]
                }
            }
            NodeKind::Fc { .. } => cx.fc(ins[0], name, Some(&format!("{name}.bias")))?,
        };
        shapes.push(cx.tape.shape(out)?);
        *uses.entry(out).or_default() += consumers[node.id];
        for v in ins {
            let left = uses.get_mut(&v).expect("inputs are counted");
            *left -= 1;
            if *left == 0 && v != x {
                cx.release(v);
            }
        }
        vars.push(out);
    }
    Ok(ForwardResult {
        logits: vars[model.output_node()],
        shapes,
    })
}

/// Evaluates `model` on `batch` without recording gradients.
pub fn forward<T: Real>(
    model: &ModelGraph,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
    options: ForwardOptions,
) -> Result<Tensor<T>> {
    let mut cx = Context::new(params, options.exec, false);
    let x = cx.input(batch.clone());
    let res = forward_on(&mut cx, model, x)?;
    let out = if options.softmax {
        cx.tape.softmax(&[res.logits], AxisSet::of(&[Axis::Channel]))?[0]
    } else {
        res.logits
    };
    cx.value(out).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::config::{MacroConfig, Stem};
    use crate::arch::graph::build_model;
    use crate::tensor::seeded_rng;

    fn tiny() -> ModelGraph {
        build_model(&MacroConfig::new("t", Stem::Cifar, &[(2, 4), (2, 8)], 5, 8)).unwrap()
    }

    #[test]
    fn logits_shape_and_probabilities() {
        let g = tiny();
        let store = ParamStore::<f64>::init(g.layout(), 0);
        let x = Tensor::randn(Shape::new(3, 3, 8, 8).unwrap(), 1.0, &mut seeded_rng(1));
        let logits = forward(&g, &store, &x, ForwardOptions::default()).unwrap();
        assert_eq!(logits.shape(), Shape::new(3, 5, 1, 1).unwrap());
        let p = forward(
            &g,
            &store,
            &x,
            ForwardOptions {
                softmax: true,
                ..Default::default()
            },
        )
        .unwrap();
        for n in 0..3 {
            let s: f64 = (0..5).map(|c| p.at(n, c, 0, 0)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let g = tiny();
        let store = ParamStore::<f32>::init(g.layout(), 0);
        let x = Tensor::zeros(Shape::new(1, 3, 16, 16).unwrap());
        assert!(forward(&g, &store, &x, ForwardOptions::default()).is_err());
    }
}
