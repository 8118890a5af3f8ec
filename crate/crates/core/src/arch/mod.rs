//! Macro-architecture: configs, presets, graph building, execution, export.

pub mod config;
pub mod exec;
pub mod export;
pub mod graph;
pub mod preset;

pub use config::{BlockSpec, HybridHparams, MacroConfig, Stem, TransitionHparams};
pub use exec::{forward, forward_on, ForwardOptions, ForwardResult};
pub use export::export_graph;
pub use graph::{build_model, hybrid_block_forward, ModelGraph, Node, NodeKind, Stage};
pub use preset::{PaperTarget, Preset};
