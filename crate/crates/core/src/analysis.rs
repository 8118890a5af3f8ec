//! Static shape inference and cost accounting.
//!
//! Costs are counted for a single image. MACs cover convolutions (the gates'
//! 1x1 spatial-attention convolutions included) and fully connected layers.
//! Everything elementwise lands in `other_ops`, counted as one operation per
//! output element of each primitive: two for batch norm (scale and shift),
//! one for an activation or a bias add, three for a softmax (exp, sum,
//! divide), one per input element for average and attention pooling, one per
//! window element for max pooling, and two per element for the fusion
//! `f * X' + v`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::graph::{ModelGraph, NodeKind, Stage, INPUT_CHANNELS};
use crate::arch::preset::PaperTarget;
use crate::error::{Error, Result};
use crate::smg::SmgConfig;
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeRecord {
    pub id: usize,
    pub name: String,
    pub kind: &'static str,
    pub stage: Stage,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeTable {
    pub records: Vec<ShapeRecord>,
}

impl ShapeTable {
    pub fn get(&self, name: &str) -> Option<Shape> {
        self.records.iter().find(|r| r.name == name).map(|r| r.shape)
    }
}

/// Output shape of every node for one `resolution x resolution` image.
pub fn infer_shapes(model: &ModelGraph, resolution: usize) -> Result<ShapeTable> {
    if resolution == 0 {
        return Err(Error::LadderUnderflow {
            path: "input".into(),
            message: "resolution must be positive".into(),
        });
    }
    let input = Shape::new(1, INPUT_CHANNELS, resolution, resolution)?;
    let mut shapes: Vec<Shape> = Vec::with_capacity(model.nodes().len());
    let mut records = Vec::with_capacity(model.nodes().len());
    for node in model.nodes() {
        let ins: Vec<Shape> = if node.inputs.is_empty() {
            vec![input]
        } else {
            node.inputs.iter().map(|&i| shapes[i]).collect()
        };
        let out = node.output_shape(&ins)?;
        shapes.push(out);
        records.push(ShapeRecord {
            id: node.id,
            name: node.name.clone(),
            kind: node.kind.label(),
            stage: node.stage,
            shape: out,
        });
    }
    Ok(ShapeTable { records })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeCost {
    pub name: String,
    pub stage: Stage,
    pub kind: &'static str,
    pub shape: Shape,
    pub params: u64,
    pub macs: u64,
    pub other_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: Stage,
    pub params: u64,
    pub macs: u64,
    pub other_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub input: usize,
    pub nodes: Vec<NodeCost>,
    pub stages: Vec<StageCost>,
    pub params: u64,
    pub macs: u64,
    pub other_ops: u64,
}

/// Learnable scalars of an SMG module with the given config.
pub fn smg_params(cfg: &SmgConfig) -> u64 {
    cfg.param_count() as u64
}

/// `(macs, other_ops)` of one SMG module on an input of shape `input`.
pub fn smg_cost(cfg: &SmgConfig, input: Shape) -> Result<(u64, u64)> {
    let out = cfg.output_shape(input)?;
    let (hw_in, hw) = ((input.h * input.w) as u64, (out.h * out.w) as u64);
    let (ci, mid, c) = (cfg.in_channels as u64, cfg.mid() as u64, cfg.out_channels as u64);
    let hu = cfg.update_config().hidden() as u64;
    let hf = cfg.forget_config().hidden() as u64;
    let conv = |spec: crate::kernels::conv::ConvSpec, h: usize, w: usize| spec.macs(h, w);
    let macs = conv(cfg.conv1_spec(), input.h, input.w)
        + conv(cfg.gconv_spec(), out.h, out.w)
        + conv(cfg.dw33_spec(), out.h, out.w)
        + conv(cfg.dw55_spec(), out.h, out.w)
        // three spatial attention convs, C -> 1
        + 3 * hw * c
        + 2 * c * hu
        + 2 * hu * c
        + c * hf
        + hf * c;
    let preact = 3 * (ci * hw_in + mid * hw_in + 2 * c * hw);
    let attention = 3 * (3 * hw + c * hw);
    let update = (hu + 2 * hu + hu) + 2 * c + 3 * 2 * c + 3 * c;
    let forget = (hf + 2 * hf + hf) + c + c;
    let fusion = 2 * c * hw;
    Ok((macs, preact + attention + update + forget + fusion))
}

/// Parameters, MACs and elementwise work of every node at `resolution`.
pub fn count_flops(model: &ModelGraph, resolution: usize) -> Result<CostReport> {
    let table = infer_shapes(model, resolution)?;
    let mut nodes = Vec::with_capacity(table.records.len());
    for (node, rec) in model.nodes().iter().zip(&table.records) {
        let out = rec.shape;
        let input = node.inputs.first().map(|&i| table.records[i].shape).unwrap_or(out);
        let n_out = out.numel() as u64;
        let (params, macs, other) = match node.kind {
            NodeKind::Input { .. } | NodeKind::Concat | NodeKind::Dropout { .. } => (0, 0, 0),
            NodeKind::Conv { spec } => (spec.param_count() as u64, spec.macs(out.h, out.w), 0),
            NodeKind::BatchNorm { channels } => (2 * channels as u64, 0, 2 * n_out),
            NodeKind::Relu => (0, 0, n_out),
            NodeKind::MaxPool { spec } => (0, 0, n_out * (spec.kernel * spec.kernel) as u64),
            NodeKind::GlobalAvgPool => (0, 0, input.numel() as u64),
            NodeKind::Smg { config } => {
                let (m, o) = smg_cost(&config, input).map_err(|e| e.at(&node.name))?;
                (smg_params(&config), m, o)
            }
            NodeKind::Fc {
                in_features,
                out_features,
            } => {
                let (i, o) = (in_features as u64, out_features as u64);
                (i * o + o, i * o, o)
            }
        };
        nodes.push(NodeCost {
            name: node.name.clone(),
            stage: node.stage,
            kind: node.kind.label(),
            shape: out,
            params,
            macs,
            other_ops: other,
        });
    }
    let mut stages: Vec<StageCost> = Vec::new();
    for n in &nodes {
        match stages.last_mut() {
            Some(s) if s.stage == n.stage => {
                s.params += n.params;
                s.macs += n.macs;
                s.other_ops += n.other_ops;
            }
            _ => stages.push(StageCost {
                stage: n.stage,
                params: n.params,
                macs: n.macs,
                other_ops: n.other_ops,
            }),
        }
    }
    Ok(CostReport {
        name: model.config().name.clone(),
        input: resolution,
        params: nodes.iter().map(|n| n.params).sum(),
        macs: nodes.iter().map(|n| n.macs).sum(),
        other_ops: nodes.iter().map(|n| n.other_ops).sum(),
        nodes,
        stages,
    })
}

/// The cost report at the model's configured resolution.
pub fn count_params(model: &ModelGraph) -> CostReport {
    count_flops(model, model.config().input).expect("shapes are validated when the model is built")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Structured,
}

/// Comparison of a report with a published target.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetCheck {
    pub target: PaperTarget,
    /// Relative deviations, as fractions.
    pub params_deviation: f64,
    pub macs_deviation: f64,
    /// Tolerances, in percent.
    pub tol_params: f64,
    pub tol_flops: f64,
    pub params_ok: bool,
    pub flops_ok: bool,
}

impl TargetCheck {
    pub fn new(report: &CostReport, target: PaperTarget, tol_params: f64, tol_flops: f64) -> Self {
        let params_deviation = report.params as f64 / (target.params_m * 1e6) - 1.0;
        let macs_deviation = report.macs as f64 / (target.macs_g * 1e9) - 1.0;
        TargetCheck {
            target,
            params_deviation,
            macs_deviation,
            tol_params,
            tol_flops,
            params_ok: params_deviation.abs() <= tol_params / 100.0,
            flops_ok: macs_deviation.abs() <= tol_flops / 100.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.params_ok && self.flops_ok
    }
}

#[derive(Serialize)]
struct StructuredNode<'a> {
    name: &'a str,
    stage: Stage,
    kind: &'static str,
    shape: [usize; 4],
    params: u64,
    macs: u64,
    other_ops: u64,
}

#[derive(Serialize)]
struct Totals {
    params: u64,
    macs: u64,
    other_ops: u64,
}

#[derive(Serialize)]
struct StructuredReport<'a> {
    name: &'a str,
    input: usize,
    nodes: Vec<StructuredNode<'a>>,
    stages: &'a [StageCost],
    totals: Totals,
    #[serde(skip_serializing_if = "Option::is_none")]
    check: Option<&'a TargetCheck>,
}

/// Renders a report, optionally with a target comparison appended.
pub fn render(report: &CostReport, format: ReportFormat, check: Option<&TargetCheck>) -> String {
    match format {
        ReportFormat::Structured => {
            let doc = StructuredReport {
                name: &report.name,
                input: report.input,
                nodes: report
                    .nodes
                    .iter()
                    .map(|n| StructuredNode {
                        name: &n.name,
                        stage: n.stage,
                        kind: n.kind,
                        shape: n.shape.dims(),
                        params: n.params,
                        macs: n.macs,
                        other_ops: n.other_ops,
                    })
                    .collect(),
                stages: &report.stages,
                totals: Totals {
                    params: report.params,
                    macs: report.macs,
                    other_ops: report.other_ops,
                },
                check,
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("reports always serialize");
            s.push('\n');
            s
        }
        ReportFormat::Text => render_text(report, check),
    }
}

fn render_text(report: &CostReport, check: Option<&TargetCheck>) -> String {
    let mut s = String::new();
    let r = report.input;
    let _ = writeln!(s, "model {} at {r}x{r}", report.name);
    let _ = writeln!(
        s,
        "{:<22} {:<13} {:<16} {:<20} {:>12} {:>14} {:>14}",
        "node", "stage", "kind", "shape", "params", "macs", "other_ops"
    );
    for n in &report.nodes {
        let _ = writeln!(
            s,
            "{:<22} {:<13} {:<16} {:<20} {:>12} {:>14} {:>14}",
            n.name,
            n.stage.to_string(),
            n.kind,
            n.shape.to_string(),
            n.params,
            n.macs,
            n.other_ops
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<13} {:>12} {:>14} {:>14}", "stage", "params", "macs", "other_ops");
    for st in &report.stages {
        let _ = writeln!(
            s,
            "{:<13} {:>12} {:>14} {:>14}",
            st.stage.to_string(),
            st.params,
            st.macs,
            st.other_ops
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "params     {} ({:.3}M)", report.params, report.params as f64 / 1e6);
    let _ = writeln!(s, "macs       {} ({:.3}G)", report.macs, report.macs as f64 / 1e9);
    let _ = writeln!(s, "other_ops  {}", report.other_ops);
    if let Some(c) = check {
        let verdict = |ok: bool| if ok { "ok" } else { "OUT OF TOLERANCE" };
        let _ = writeln!(
            s,
            "target params {:.1}M: {:+.2}% (tolerance {}%) {}",
            c.target.params_m,
            100.0 * c.params_deviation,
            c.tol_params,
            verdict(c.params_ok)
        );
        let _ = writeln!(
            s,
            "target macs   {:.1}G: {:+.2}% (tolerance {}%) {}",
            c.target.macs_g,
            100.0 * c.macs_deviation,
            c.tol_flops,
            verdict(c.flops_ok)
        );
    }
    s
}

/// Shape table and cost report of `model` at `resolution`.
pub fn summarize(model: &ModelGraph, resolution: usize, format: ReportFormat) -> Result<String> {
    Ok(render(&count_flops(model, resolution)?, format, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::graph::build_model;
    use crate::arch::preset::Preset;
    use crate::kernels::conv::ConvSpec;

    #[test]
    fn conv_mac_formula() {
        assert_eq!(ConvSpec::new(2, 3, 1).macs(4, 4), 96);
    }

    #[test]
    fn preset_b_ladder() {
        let g = build_model(&Preset::B.config()).unwrap();
        let t = infer_shapes(&g, 224).unwrap();
        let hw = |n: &str| t.get(n).unwrap().h;
        assert_eq!(hw("stem.conv1"), 112);
        assert_eq!(hw("stem.pool"), 56);
        assert_eq!(hw("block1.output"), 56);
        assert_eq!(hw("transition1"), 28);
        assert_eq!(hw("transition2"), 14);
        assert_eq!(hw("transition3"), 7);
        assert_eq!(t.get("block1.output").unwrap().c, 160);
        assert!(matches!(infer_shapes(&g, 7), Err(Error::LadderUnderflow { .. })));
    }

    #[test]
    fn closed_form_counts_match_layouts() {
        for p in Preset::ALL {
            let g = build_model(&p.config()).unwrap();
            assert_eq!(count_params(&g).params as usize, g.layout().num_elements(), "{p}");
        }
    }

    #[test]
    fn stage_totals_sum_to_the_whole() {
        let g = build_model(&Preset::B.config()).unwrap();
        let r = count_params(&g);
        assert_eq!(r.stages.iter().map(|s| s.params).sum::<u64>(), r.params);
        assert_eq!(r.stages.iter().map(|s| s.macs).sum::<u64>(), r.macs);
        let blocks = r.stages.iter().filter(|s| matches!(s.stage, Stage::Block(_))).count();
        let transitions = r.stages.iter().filter(|s| matches!(s.stage, Stage::Transition(_))).count();
        assert_eq!((blocks, transitions), (4, 3));
    }
}
