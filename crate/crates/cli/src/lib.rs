//! Command-line pipeline around the `morphospace` library: configuration,
//! cached stage execution and synthetic fixture generation.

pub mod config;
pub mod fixtures;
pub mod pipeline;

pub use config::{Bandwidth, PipelineConfig, SamplingMode, Stage};
pub use pipeline::{run_pipeline, RunManifest, StageRecord};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed{}: {message}", specimen.as_ref().map(|s| format!(" on {s}")).unwrap_or_default())]
    Stage {
        stage: String,
        specimen: Option<String>,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage { .. } => EXIT_STAGE,
        }
    }

    /// One-line JSON report for stderr.
    pub fn to_json(&self) -> String {
        let value = match self {
            CliError::Config(message) => serde_json::json!({ "error": "config", "message": message }),
            CliError::Stage {
                stage,
                specimen,
                message,
            } => serde_json::json!({
                "error": "stage",
                "stage": stage,
                "specimen": specimen,
                "message": message,
            }),
        };
        value.to_string()
    }
}
