//! The instantiated dataflow graph of a model.

use std::fmt;

use serde::Serialize;

use super::config::{MacroConfig, Stem, HEAD_DROPOUT};
use crate::context::Context;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::kernels::pool::PoolSpec;
use crate::params::ParamLayout;
use crate::smg::{smg_forward, SmgConfig};
use crate::tape::Var;
use crate::tensor::{Real, Shape};

/// Image channels at the input.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Input { channels: usize },
    Conv { spec: ConvSpec },
    BatchNorm { channels: usize },
    Relu,
    MaxPool { spec: PoolSpec },
    Smg { config: SmgConfig },
    Concat,
    GlobalAvgPool,
    Dropout { rate: f64 },
    Fc { in_features: usize, out_features: usize },
}

impl NodeKind {
    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool { .. } => "max_pool",
            NodeKind::Smg { .. } => "smg",
            NodeKind::Concat => "concat",
            NodeKind::GlobalAvgPool => "global_avg_pool",
            NodeKind::Dropout { .. } => "dropout",
            NodeKind::Fc { .. } => "fc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Stem,
    /// Hybrid block, 1-based.
    Block(usize),
    /// Transition following block `i`, 1-based.
    Transition(usize),
    Head,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stem => f.write_str("stem"),
            Stage::Block(i) => write!(f, "block{i}"),
            Stage::Transition(i) => write!(f, "transition{i}"),
            Stage::Head => f.write_str("head"),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    pub id: usize,
    pub name: String,
    pub stage: Stage,
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
}

impl Node {
    /// Learnable parameters and buffers owned by this node.
    pub fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        match self.kind {
            NodeKind::Conv { spec } => l.conv(&self.name, &spec),
            NodeKind::BatchNorm { channels } => l.batch_norm(&self.name, channels),
            NodeKind::Smg { config } => l = config.layout(&self.name),
            NodeKind::Fc {
                in_features,
                out_features,
            } => {
                l.fc_weight(&self.name, in_features, out_features);
                l.bias(&format!("{}.bias", self.name), out_features);
            }
            _ => {}
        }
        l
    }

    /// Output shape given the input shapes, in node order.
    pub fn output_shape(&self, inputs: &[Shape]) -> Result<Shape> {
        let path = &self.name;
        let ladder = |e: Error| Error::LadderUnderflow {
            path: path.clone(),
            message: e.to_string(),
        };
        let one = || -> Result<Shape> {
            match inputs {
                [s] => Ok(*s),
                _ => Err(Error::InvalidArgument(format!("expects one input, got {}", inputs.len())).at(path)),
            }
        };
        let channels = |expected: usize, got: Shape| -> Result<()> {
            if got.c != expected {
                return Err(Error::InvalidArgument(format!("expects {expected} channels, got {got}")).at(path));
            }
            Ok(())
        };
        match self.kind {
            NodeKind::Input { .. } => one(),
            NodeKind::Conv { spec } => {
                let s = one()?;
                spec.validate().map_err(|e| e.at(path))?;
                channels(spec.in_channels, s)?;
                spec.output_shape(s).map_err(ladder)
            }
            NodeKind::BatchNorm { channels: c } => {
                let s = one()?;
                channels(c, s)?;
                Ok(s)
            }
            NodeKind::Relu | NodeKind::Dropout { .. } => one(),
            NodeKind::MaxPool { spec } => spec.output_shape(one()?).map_err(ladder),
            NodeKind::Smg { config } => {
                let s = one()?;
                config.validate().map_err(|e| e.at(path))?;
                channels(config.in_channels, s)?;
                config.output_shape(s).map_err(ladder)
            }
            NodeKind::Concat => {
                let first = *inputs
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()).at(path))?;
                let mut c = 0;
                for s in inputs {
                    if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: *s,
                        }
                        .at(path));
                    }
                    c += s.c;
                }
                Ok(first.with_channels(c))
            }
            NodeKind::GlobalAvgPool => {
                let s = one()?;
                Ok(Shape { h: 1, w: 1, ..s })
            }
            NodeKind::Fc { in_features, .. } => {
                let s = one()?;
                if !s.is_descriptor() || s.c != in_features {
                    return Err(Error::InvalidArgument(format!(
                        "classifier expects ({}, {in_features}, 1, 1), got {s}",
                        s.n
                    ))
                    .at(path));
                }
                Ok(Shape { c: self.out_features(), ..s })
            }
        }
    }

    fn out_features(&self) -> usize {
        match self.kind {
            NodeKind::Fc { out_features, .. } => out_features,
            _ => 0,
        }
    }
}

/// Nodes in topological order plus the derived edge list and parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    config: MacroConfig,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    layout: ParamLayout,
}

impl ModelGraph {
    pub fn config(&self) -> &MacroConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn input_node(&self) -> usize {
        0
    }

    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Every SMG node with its configuration.
    pub fn smg_nodes(&self) -> impl Iterator<Item = (&Node, SmgConfig)> {
        self.nodes.iter().filter_map(|n| match n.kind {
            NodeKind::Smg { config } => Some((n, config)),
            _ => None,
        })
    }
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, name: String, stage: Stage, kind: NodeKind, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            name,
            stage,
            kind,
            inputs,
        });
        id
    }
}

/// Builds and validates the graph, checking shapes at `config.input`.
pub fn build_model(config: &MacroConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut b = Builder { nodes: Vec::new() };
    let mut cur = b.push(
        "input".into(),
        Stage::Stem,
        NodeKind::Input {
            channels: INPUT_CHANNELS,
        },
        vec![],
    );
    let mut channels = config.stem_channels();
    match config.stem {
        Stem::Cifar => {
            let spec = ConvSpec::new(INPUT_CHANNELS, channels, 3).padding(1);
            cur = b.push("stem.conv".into(), Stage::Stem, NodeKind::Conv { spec }, vec![cur]);
        }
        Stem::Imagenet => {
            let mut c_in = INPUT_CHANNELS;
            for (i, (c, stride)) in [(32, 2), (32, 1), (64, 1)].into_iter().enumerate() {
                let i = i + 1;
                let spec = ConvSpec::new(c_in, c, 3).padding(1).stride(stride);
                cur = b.push(format!("stem.conv{i}"), Stage::Stem, NodeKind::Conv { spec }, vec![cur]);
                cur = b.push(
                    format!("stem.bn{i}"),
                    Stage::Stem,
                    NodeKind::BatchNorm { channels: c },
                    vec![cur],
                );
                cur = b.push(format!("stem.relu{i}"), Stage::Stem, NodeKind::Relu, vec![cur]);
                c_in = c;
            }
            cur = b.push(
                "stem.pool".into(),
                Stage::Stem,
                NodeKind::MaxPool {
                    spec: PoolSpec::MAX3X3_S2,
                },
                vec![cur],
            );
        }
    }

    let h = config.hybrid;
    let t = config.transition;
    for (bi, block) in config.blocks.iter().enumerate() {
        let i = bi + 1;
        let stage = Stage::Block(i);
        let mut concat = cur;
        for j in 1..=block.modules {
            let module = SmgConfig {
                in_channels: channels,
                out_channels: block.growth,
                alpha: h.alpha,
                groups: h.g,
                stride: 1,
                ru: h.ru,
                rf: h.rf,
            };
            let name = format!("block{i}.module{j}");
            module.validate().map_err(|e| e.at(&name))?;
            let out = b.push(name, stage, NodeKind::Smg { config: module }, vec![concat]);
            channels += block.growth;
            let cname = if j == block.modules {
                format!("block{i}.output")
            } else {
                format!("block{i}.concat{}", j + 1)
            };
            concat = b.push(cname, stage, NodeKind::Concat, vec![concat, out]);
        }
        cur = concat;
        if i < config.blocks.len() {
            let module = SmgConfig {
                in_channels: channels,
                out_channels: (t.theta * channels as f64).floor() as usize,
                alpha: t.alpha,
                groups: t.g,
                stride: 2,
                ru: t.ru,
                rf: t.rf,
            };
            let name = format!("transition{i}");
            module.validate().map_err(|e| e.at(&name))?;
            cur = b.push(name, Stage::Transition(i), NodeKind::Smg { config: module }, vec![cur]);
            channels = module.out_channels;
        }
    }

    cur = b.push("head.bn".into(), Stage::Head, NodeKind::BatchNorm { channels }, vec![cur]);
    cur = b.push("head.relu".into(), Stage::Head, NodeKind::Relu, vec![cur]);
    cur = b.push("head.pool".into(), Stage::Head, NodeKind::GlobalAvgPool, vec![cur]);
    cur = b.push(
        "head.dropout".into(),
        Stage::Head,
        NodeKind::Dropout { rate: HEAD_DROPOUT },
        vec![cur],
    );
    b.push(
        "head.fc".into(),
        Stage::Head,
        NodeKind::Fc {
            in_features: channels,
            out_features: config.classes,
        },
        vec![cur],
    );

    let nodes = b.nodes;
    let edges = nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(move |&src| (src, n.id)))
        .collect();
    let mut layout = ParamLayout::new();
    for n in &nodes {
        layout.extend(n.layout());
    }
    let graph = ModelGraph {
        config: config.clone(),
        nodes,
        edges,
        layout,
    };
    crate::analysis::infer_shapes(&graph, config.input)?;
    Ok(graph)
}

/// Runs one hybrid block: module `j` sees `concat(x, O_1, ..., O_{j-1})`.
/// Returns `concat(x, O_1, ..., O_n)`.
pub fn hybrid_block_forward<T: Real>(
    cx: &mut Context<'_, T>,
    prefix: &str,
    modules: &[SmgConfig],
    x: Var,
) -> Result<Var> {
    let mut acc = x;
    for (j, cfg) in modules.iter().enumerate() {
        let name = format!("{prefix}.module{}", j + 1);
        let have = cx.tape.shape(acc)?.c;
        if have != cfg.in_channels {
            return Err(Error::InvalidArgument(format!(
                "module expects {} input channels, the block provides {have}",
                cfg.in_channels
            ))
            .at(name));
        }
        let out = smg_forward(cx, &name, cfg, acc).map_err(|e| e.at(&name))?;
        let next = cx.tape.concat(&[acc, out.out])?;
        cx.release(out.out);
        if acc != x {
            cx.release(acc);
        }
        acc = next;
    }
    Ok(acc)
}
