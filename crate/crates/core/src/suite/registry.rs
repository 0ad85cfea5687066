//! Named invariant checks, the manifest they must cover, and the runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::checks;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Passed,
    Failed,
    Skipped,
}

/// Result of one registered check. A failure carries the seed that
/// reproduces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub module: String,
    pub status: Status,
    pub measured: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub seed: u64,
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.status == Status::Passed
    }
}

/// What a check function reports back.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub skipped: bool,
    pub measured: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub seed: Option<u64>,
    pub detail: String,
}

impl Outcome {
    pub fn new(tolerance: f64) -> Self {
        Self {
            passed: true,
            tolerance,
            ..Self::default()
        }
    }

    pub fn skipped(reason: impl Into<String>) -> Self {
        Self {
            skipped: true,
            detail: reason.into(),
            ..Self::default()
        }
    }

    pub fn measure(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.measured.insert(key.into(), value);
        self
    }

    /// Records a condition; the first failing one sets `seed` and `detail`.
    pub fn require(&mut self, ok: bool, seed: u64, detail: impl FnOnce() -> String) -> &mut Self {
        if !ok && self.passed {
            self.passed = false;
            self.seed = Some(seed);
            self.detail = detail();
        }
        self
    }
}

/// Inputs shared by every check.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteContext {
    pub seed: u64,
    /// Random inputs per statistical battery.
    pub trials: usize,
    /// Dataset directory with a `report/summary.json`, for the checks that
    /// read pipeline results.
    pub dataset: Option<PathBuf>,
}

impl Default for SuiteContext {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            dataset: None,
        }
    }
}

pub type CheckFn = fn(&SuiteContext) -> Result<Outcome>;

#[derive(Clone, Copy)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub run: CheckFn,
}

impl Check {
    pub fn full_name(&self) -> String {
        format!("{}.{}", self.module, self.name)
    }
}

/// Every invariant the modules promise, by `module.name`.
pub const INVARIANTS: &[&str] = &[
    "tensor_autodiff.op_gradients",
    "tensor_autodiff.softmax_rows",
    "tensor_autodiff.backward_purity",
    "tensor_autodiff.reshape_transpose_exact",
    "diffusion.schedule_monotone",
    "diffusion.forward_marginals",
    "diffusion.denoising_loss_zero_iff_exact",
    "diffusion.sampling_chain_pure",
    "autoencoder.roundtrip_shape",
    "autoencoder.decode_gradient",
    "autoencoder.latent_layout",
    "contrastive_encoder.shallow_taps",
    "contrastive_encoder.image_features_pure",
    "contrastive_encoder.cosine_scale_invariant",
    "neurosim.linear_response",
    "neurosim.trial_average_exact",
    "neurosim.difficulty_monotone",
    "decode.ridge_optimality",
    "decode.cv_folds",
    "decode.mask_is_selection",
    "decode.monotone_degradation",
    "decode.planted_recovery",
    "decode.topk_oracle",
    "reconstruct.stage2_deterministic",
    "reconstruct.stage2_gradient",
    "reconstruct.best_snapshot",
    "reconstruct.structure_loss_oracle",
    "reconstruct.ablation_ordering",
    "metrics.symmetric",
    "metrics.semantic_scale_invariant",
    "metrics.self_similarity",
    "metrics.pcc_oracle",
    "cli_orchestrator.pipeline_reproducible",
    "cli_orchestrator.hash_validation",
    "property_suite.deterministic",
    "property_suite.registry_coverage",
];

pub fn registry() -> Vec<Check> {
    let c = |module, name, run| Check { module, name, run };
    vec![
        c("tensor_autodiff", "op_gradients", checks::op_gradients as CheckFn),
        c("tensor_autodiff", "softmax_rows", checks::softmax_rows),
        c("tensor_autodiff", "backward_purity", checks::backward_purity),
        c("tensor_autodiff", "reshape_transpose_exact", checks::reshape_transpose_exact),
        c("diffusion", "schedule_monotone", checks::schedule_monotone),
        c("diffusion", "forward_marginals", checks::forward_marginals),
        c("diffusion", "denoising_loss_zero_iff_exact", checks::denoising_loss_zero),
        c("diffusion", "sampling_chain_pure", checks::sampling_chain_pure),
        c("autoencoder", "roundtrip_shape", checks::roundtrip_shape),
        c("autoencoder", "decode_gradient", checks::decode_gradient),
        c("autoencoder", "latent_layout", checks::latent_layout),
        c("contrastive_encoder", "shallow_taps", checks::shallow_taps),
        c("contrastive_encoder", "image_features_pure", checks::image_features_pure),
        c("contrastive_encoder", "cosine_scale_invariant", checks::cosine_scale_invariant),
        c("neurosim", "linear_response", checks::linear_response),
        c("neurosim", "trial_average_exact", checks::trial_average_exact),
        c("neurosim", "difficulty_monotone", checks::difficulty_monotone),
        c("decode", "ridge_optimality", checks::ridge_optimality),
        c("decode", "cv_folds", checks::cv_folds),
        c("decode", "mask_is_selection", checks::mask_is_selection),
        c("decode", "monotone_degradation", checks::monotone_degradation),
        c("decode", "planted_recovery", checks::planted_recovery),
        c("decode", "topk_oracle", checks::topk_oracle),
        c("reconstruct", "stage2_deterministic", checks::stage2_deterministic),
        c("reconstruct", "stage2_gradient", checks::stage2_gradient),
        c("reconstruct", "best_snapshot", checks::best_snapshot),
        c("reconstruct", "structure_loss_oracle", checks::structure_loss_oracle),
        c("reconstruct", "ablation_ordering", checks::ablation_ordering),
        c("metrics", "symmetric", checks::metrics_symmetric),
        c("metrics", "semantic_scale_invariant", checks::semantic_scale_invariant),
        c("metrics", "self_similarity", checks::self_similarity),
        c("metrics", "pcc_oracle", checks::pcc_oracle),
        c("cli_orchestrator", "pipeline_reproducible", checks::pipeline_reproducible),
        c("cli_orchestrator", "hash_validation", checks::hash_validation),
        c("property_suite", "deterministic", checks::suite_deterministic),
        c("property_suite", "registry_coverage", checks::registry_coverage),
    ]
}

/// Names in `INVARIANTS` missing from the registry, and registry names that
/// are duplicated or not in the manifest.
pub fn coverage_gaps(checks: &[Check]) -> (Vec<String>, Vec<String>) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in checks {
        *counts.entry(c.full_name()).or_default() += 1;
    }
    let missing = INVARIANTS
        .iter()
        .filter(|n| counts.get(**n).copied().unwrap_or(0) == 0)
        .map(|n| n.to_string())
        .collect();
    let extra = counts
        .iter()
        .filter(|(n, &k)| k != 1 || !INVARIANTS.contains(&n.as_str()))
        .map(|(n, _)| n.clone())
        .collect();
    (missing, extra)
}

pub fn run_check(check: &Check, ctx: &SuiteContext) -> CheckResult {
    let (status, out) = match (check.run)(ctx) {
        Ok(o) if o.skipped => (Status::Skipped, o),
        Ok(o) if o.passed => (Status::Passed, o),
        Ok(o) => (Status::Failed, o),
        Err(e) => (
            Status::Failed,
            Outcome {
                passed: false,
                detail: format!("error: {e}"),
                ..Outcome::default()
            },
        ),
    };
    CheckResult {
        name: check.full_name(),
        module: check.module.to_string(),
        status,
        measured: out.measured,
        tolerance: out.tolerance,
        seed: out.seed.unwrap_or(ctx.seed),
        detail: out.detail,
    }
}

/// Runs every check whose module (or full name) matches `filter`, in
/// parallel; results come back sorted by name.
pub fn run_invariant_suite(filter: Option<&str>, ctx: &SuiteContext) -> Vec<CheckResult> {
    use rayon::prelude::*;
    let selected: Vec<Check> = registry()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.module == f || c.full_name() == f))
        .collect();
    let mut out: Vec<CheckResult> = selected.par_iter().map(|c| run_check(c, ctx)).collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// One line per check, for logs.
pub fn summary_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        let status = match r.status {
            Status::Passed => "PASS",
            Status::Failed => "FAIL",
            Status::Skipped => "SKIP",
        };
        s.push_str(&format!("{status} {:<45} seed {:<20} {}\n", r.name, r.seed, r.detail));
    }
    s
}
