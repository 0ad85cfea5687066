//! Cross-module verification: the invariant registry and the scaled
//! ablation experiment.

pub mod ablation;
pub mod checks;
pub mod gradients;
pub mod registry;

pub use ablation::{run_ablation_experiment, AblationReport, Estimate};
pub use registry::{run_invariant_suite, CheckResult, Status, SuiteContext};
