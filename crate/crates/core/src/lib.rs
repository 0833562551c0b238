//! Differentiable fixed-operator expression trees for symbolic regression.
//!
//! Three binary operators (`eml`, `sml`, `rml`) are arranged in a perfect
//! binary tree whose inputs are chosen by learnable selectors. Training
//! relaxes the selectors with a temperature, anneals them toward one-hot
//! choices, then snaps the tree into a concrete formula that is checked
//! against the target.

pub mod analysis;
pub mod arch;
pub mod diff;
pub mod error;
pub mod expr;
pub mod ops;
pub mod runner;
pub mod targets;
pub mod train;

pub use analysis::{clopper_pearson, exact_recovery, fisher_exact, summarize, RateSummary, RecoveryVerdict};
pub use arch::{build_architecture, enumerate_expressible, harden, soft_forward, ArchitectureSpec, Family, ParamVector};
pub use diff::{leaf_grad_ratio, loss_and_grad, GradientVector, Penalties};
pub use error::{Error, Result};
pub use expr::{Arg, HardExpression};
pub use ops::{eval_op, grad_op, Invalid, Operator, OVERFLOW_CAP};
pub use targets::{catalog, eval_expression, instantiate, make_dataset, Dataset, GridSpec, Shape, TargetSpec};
pub use train::{init_params, run_trial, tau_schedule, GradientTrace, InitStrategy, TrainConfig, TrialResult};
pub use runner::{emit_gradient_trace, emit_heatmap, run_hp_sensitivity, run_matrix, CellSpec, ConfigOverrides, ExperimentMatrix, HpSweep, ResultsBundle};
