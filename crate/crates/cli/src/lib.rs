//! Pipeline runner: synthesize, solve, certify, simulate and report.

pub mod manifest;
pub mod pipeline;
pub mod plan;
pub mod svg;

pub use manifest::{parse_override, parse_stages, RunManifest, Stage};
pub use pipeline::{load_scenario, run, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("unknown scenario '{name}'; valid names: {}", valid.join(", "))]
    UnknownScenario { name: String, valid: Vec<String> },

    #[error("{0}")]
    Usage(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: rhc_core::Error,
    },

    #[error("stage {stage} failed: {source}")]
    Io {
        stage: &'static str,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn stage(stage: &'static str, source: rhc_core::Error) -> Self {
        RunError::Stage { stage, source }
    }

    pub fn io(stage: &'static str, source: std::io::Error) -> Self {
        RunError::Io { stage, source }
    }

    /// 2 for usage errors and unknown scenarios, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::UnknownScenario { .. } | RunError::Usage(_) => 2,
            RunError::Stage { .. } | RunError::Io { .. } => 3,
        }
    }
}
