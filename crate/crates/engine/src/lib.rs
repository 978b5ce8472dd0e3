//! Orchestration of the pricing pipeline: configuration, the four-stage
//! run (simulate, price, solve, hedge), report assembly and emission.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{resolve_seed, RunConfig};
pub use pipeline::{run_pricing, Artifacts, PricingResult, SwitchStats};
pub use report::emit_reports;

use thiserror::Error;

/// Engine-level errors with the pipeline stage attached.
#[derive(Debug, Error)]
pub enum EngineError {
    /// Bad configuration file or option.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: switchcsa_core::CoreError,
    },

    /// Writing reports failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EngineError {
    pub fn stage(stage: &'static str) -> impl FnOnce(switchcsa_core::CoreError) -> EngineError {
        move |source| EngineError::Stage { stage, source }
    }

    /// Process exit code: 2 config, 3 numerical, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        use switchcsa_core::CoreError;
        match self {
            EngineError::Config(_) => 2,
            EngineError::Io(_) => 4,
            EngineError::Stage { source, .. } => match source {
                CoreError::InvalidArgument(_) => 2,
                CoreError::NumericalFailure(_) => 3,
                CoreError::Io(_) | CoreError::Format(_) => 4,
            },
        }
    }
}
