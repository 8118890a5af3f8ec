//! JSON document describing a built graph. Key and node order are fixed, so
//! the output can be diffed against a golden file.

use serde::Serialize;

use super::config::MacroConfig;
use super::graph::{ModelGraph, NodeKind, Stage};
use crate::analysis::infer_shapes;
use crate::error::Result;

#[derive(Serialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize)]
struct NodeEntry<'a> {
    id: usize,
    name: &'a str,
    stage: Stage,
    kind: &'static str,
    config: &'a NodeKind,
    inputs: &'a [usize],
    output_shape: [usize; 4],
    params: Vec<ParamEntry>,
    buffers: Vec<ParamEntry>,
}

#[derive(Serialize)]
struct GraphDocument<'a> {
    config: &'a MacroConfig,
    input_node: usize,
    output_node: usize,
    parameters: usize,
    nodes: Vec<NodeEntry<'a>>,
    edges: &'a [(usize, usize)],
}

/// Pretty-printed JSON, terminated by a newline.
pub fn export_graph(model: &ModelGraph) -> Result<String> {
    let shapes = infer_shapes(model, model.config().input)?;
    let nodes = model
        .nodes()
        .iter()
        .zip(&shapes.records)
        .map(|(n, rec)| {
            let layout = n.layout();
            NodeEntry {
                id: n.id,
                name: &n.name,
                stage: n.stage,
                kind: n.kind.label(),
                config: &n.kind,
                inputs: &n.inputs,
                output_shape: rec.shape.dims(),
                params: layout
                    .params
                    .into_iter()
                    .map(|p| ParamEntry {
                        name: p.name,
                        shape: p.shape.dims(),
                    })
                    .collect(),
                buffers: layout
                    .buffers
                    .into_iter()
                    .map(|(name, s)| ParamEntry { name, shape: s.dims() })
                    .collect(),
            }
        })
        .collect();
    let doc = GraphDocument {
        config: model.config(),
        input_node: model.input_node(),
        output_node: model.output_node(),
        parameters: model.layout().num_elements(),
        nodes,
        edges: model.edges(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("graph documents always serialize");
    text.push('\n');
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::graph::build_model;
    use crate::arch::preset::Preset;

    #[test]
    fn export_is_stable_and_parseable() {
        let g = build_model(&Preset::A1.config()).unwrap();
        let a = export_graph(&g).unwrap();
        assert_eq!(a, export_graph(&build_model(&Preset::A1.config()).unwrap()).unwrap());
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["nodes"].as_array().unwrap().len(), g.nodes().len());
        assert_eq!(v["nodes"][1]["name"], "stem.conv");
        assert_eq!(v["nodes"][1]["output_shape"], serde_json::json!([1, 24, 32, 32]));
    }
}
