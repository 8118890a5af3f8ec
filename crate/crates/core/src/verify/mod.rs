//! Gradient checks, invariant suite and the toy overfitting run.

pub mod gradcheck;
pub mod invariants;
pub mod overfit;

pub use gradcheck::{gradcheck, op_targets_for, GradCheckOptions, GradCheckReport, GradTarget, OpTarget};
pub use invariants::{run_invariant_suite, InvariantCheck, InvariantReport};
pub use overfit::{overfit_toy, OverfitConfig, OverfitTrace};
