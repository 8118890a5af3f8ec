//! Structural and normalization checks on a seeded random forward pass.
//!
//! The model runs in single precision on a batch of two random images with
//! batch-norm in train mode, so every gate sees batch statistics rather than
//! the default running averages.

use serde::Serialize;

use crate::analysis::infer_shapes;
use crate::arch::config::MacroConfig;
use crate::arch::exec::forward_on;
use crate::arch::graph::{build_model, NodeKind, Stage, INPUT_CHANNELS};
use crate::context::{Context, ExecOptions, GateProbe, TestHooks};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{seeded_rng, Shape, Tensor};

/// Normalization tolerance for single-precision gate outputs.
pub const SINGLE_TOLERANCE: f64 = 1e-6;
pub const SUITE_BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation found, zero for exact checks that hold.
    pub residual: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantReport {
    pub model: String,
    pub seed: u64,
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn run_invariant_suite(config: &MacroConfig, seed: u64, hooks: TestHooks) -> Result<InvariantReport> {
    if config.blocks.is_empty() {
        return Err(Error::InvalidArgument(format!("model `{}` has no hybrid blocks", config.name)));
    }
    let model = build_model(config)?;
    let store = ParamStore::<f32>::init(model.layout(), seed);
    let r = config.input;
    let batch = Tensor::randn(
        Shape::new(SUITE_BATCH, INPUT_CHANNELS, r, r)?,
        1.0,
        &mut seeded_rng(seed.wrapping_add(1)),
    );
    let opts = ExecOptions {
        collect_probes: true,
        seed,
        hooks,
        ..ExecOptions::train()
    };
    let mut cx = Context::new(&store, opts, false);
    let x = cx.input(batch);
    let result = forward_on(&mut cx, &model, x)?;
    let logits_finite = cx.value(result.logits)?.all_finite();

    let mut checks = Vec::new();

    let (mut attn_res, mut attn_neg, mut maps) = (0.0f64, false, 0usize);
    let (mut branch_res, mut branch_open, mut pairs) = (0.0f64, true, 0usize);
    let (mut forget_open, mut forget_min, mut forget_max, mut decays) = (true, 1.0f64, 0.0f64, 0usize);
    for p in &cx.probes {
        match p {
            GateProbe::SpatialAttention { sums, min, .. } => {
                for s in sums {
                    attn_res = attn_res.max((s - 1.0).abs());
                    maps += 1;
                }
                attn_neg |= *min < 0.0;
            }
            GateProbe::BranchWeights { u33, u55, .. } => {
                for (a, b) in u33.iter().zip(u55) {
                    branch_res = branch_res.max((a + b - 1.0).abs());
                    branch_open &= *a > 0.0 && *a < 1.0 && *b > 0.0 && *b < 1.0;
                    pairs += 1;
                }
            }
            GateProbe::Forget { f, .. } => {
                for &v in f {
                    forget_open &= v > 0.0 && v < 1.0;
                    forget_min = forget_min.min(v);
                    forget_max = forget_max.max(v);
                    decays += 1;
                }
            }
        }
    }
    checks.push(InvariantCheck {
        name: "softmax-normalization",
        passed: maps > 0 && !attn_neg && attn_res <= SINGLE_TOLERANCE,
        residual: attn_res,
        detail: format!("{maps} spatial attention maps, max |sum - 1| = {attn_res:.3e}"),
    });
    checks.push(InvariantCheck {
        name: "branch-sum-to-one",
        passed: pairs > 0 && branch_open && branch_res <= SINGLE_TOLERANCE,
        residual: branch_res,
        detail: format!(
            "{pairs} channel pairs, max |u33 + u55 - 1| = {branch_res:.3e}, all inside (0, 1): {branch_open}"
        ),
    });
    checks.push(InvariantCheck {
        name: "forget-range",
        passed: decays > 0 && forget_open,
        residual: if forget_open { 0.0 } else { 1.0 },
        detail: format!("{decays} decay factors in [{forget_min:.6}, {forget_max:.6}]"),
    });

    let shapes = &result.shapes;
    let mut book_res = 0.0f64;
    let mut book_detail = String::from("all module inputs follow C0 + (j-1)k");
    for (bi, block) in config.blocks.iter().enumerate() {
        let i = bi + 1;
        let modules: Vec<_> = model
            .smg_nodes()
            .filter(|(n, _)| n.stage == Stage::Block(i))
            .map(|(n, _)| n)
            .collect();
        let c0 = shapes[modules[0].inputs[0]].c;
        for (j, node) in modules.iter().enumerate() {
            let have = shapes[node.inputs[0]].c;
            let want = c0 + j * block.growth;
            if have != want {
                book_res = book_res.max(have.abs_diff(want) as f64);
                book_detail = format!("{} sees {have} channels, expected {want}", node.name);
            }
        }
        let out = model
            .node(&format!("block{i}.output"))
            .map(|n| shapes[n.id].c)
            .unwrap_or(0);
        if out != c0 + block.modules * block.growth {
            book_res = book_res.max(1.0);
            book_detail = format!("block{i} emits {out} channels");
        }
        if let Some(t) = model.node(&format!("transition{i}")) {
            let want = (config.transition.theta * out as f64).floor() as usize;
            if shapes[t.id].c != want {
                book_res = book_res.max(1.0);
                book_detail = format!("transition{i} emits {} channels, expected {want}", shapes[t.id].c);
            }
        }
    }
    checks.push(InvariantCheck {
        name: "channel-bookkeeping",
        passed: book_res == 0.0,
        residual: book_res,
        detail: book_detail,
    });

    let table = infer_shapes(&model, r)?;
    let mut ladder_detail = format!("{} node shapes agree with static inference", shapes.len());
    let mut ladder_ok = logits_finite;
    for (rec, got) in table.records.iter().zip(shapes) {
        let want = Shape { n: SUITE_BATCH, ..rec.shape };
        if want != *got {
            ladder_ok = false;
            ladder_detail = format!("{}: executed {got}, inferred {want}", rec.name);
            break;
        }
    }
    if !logits_finite {
        ladder_detail = "non-finite logits".into();
    }
    let smg_strides_ok = model.nodes().iter().all(|n| match n.kind {
        NodeKind::Smg { config } => (config.stride == 2) == matches!(n.stage, Stage::Transition(_)),
        _ => true,
    });
    checks.push(InvariantCheck {
        name: "shape-ladder",
        passed: ladder_ok && smg_strides_ok,
        residual: if ladder_ok && smg_strides_ok { 0.0 } else { 1.0 },
        detail: ladder_detail,
    });

    Ok(InvariantReport {
        model: config.name.clone(),
        seed,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::config::Stem;

    fn tiny() -> MacroConfig {
        MacroConfig::new("tiny", Stem::Cifar, &[(2, 8), (2, 16)], 10, 8)
    }

    #[test]
    fn tiny_model_passes() {
        let r = run_invariant_suite(&tiny(), 0, TestHooks::default()).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn bypassed_normalization_is_caught() {
        let hooks = TestHooks {
            bypass_branch_normalization: true,
        };
        let r = run_invariant_suite(&tiny(), 0, hooks).unwrap();
        assert!(!r.check("branch-sum-to-one").unwrap().passed);
        assert!(r.check("forget-range").unwrap().passed);
    }

    #[test]
    fn empty_model_is_an_error() {
        let mut c = tiny();
        c.blocks.clear();
        assert!(run_invariant_suite(&c, 0, TestHooks::default()).is_err());
    }
}
