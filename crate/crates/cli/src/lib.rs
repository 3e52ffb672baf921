//! Operations behind the `langgrasp` command suite.
//!
//! Every command of the binary is a thin wrapper over a function here, so the
//! same code paths are exercised by the integration tests and the acceptance
//! suite. Outputs are written to a temporary sibling and renamed into place;
//! nothing is written before inputs have been validated.

pub mod bench;
pub mod eval;
pub mod tools;
pub mod train;

use std::path::Path;

use langgrasp_core::io_formats::write_atomic;
use thiserror::Error;

pub use bench::{
    nested_manifests, run_bench_complexity, run_bench_efficiency, run_bench_modes, ComplexityOutput, EfficiencyOutput,
    ModesOutput,
};
pub use eval::{eval_dataset, run_cross_eval, run_eval, CrossEvalOutput, EvalOptions, EvalOutput, Model};
pub use tools::{decode_maps_file, lift, run_gradcheck, GradcheckOptions, GradcheckOutcome, LiftOptions, LiftOutput};
pub use train::{learning_recipe, run_train, train_model, TrainOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] langgrasp_core::Error),
    /// A check run by the command itself (such as the gradient check) failed.
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("invalid arguments: {0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::CheckFailed(_) => "CheckFailed",
            CliError::Usage(_) => "UsageError",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Writes `text` to `path` atomically, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| langgrasp_core::Error::io(parent, e))?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

/// One JSON document per line.
pub fn to_jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}
