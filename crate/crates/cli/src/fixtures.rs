//! Synthetic deformed families written as PLY directories.

use std::path::Path;

use morphospace::synthetic::{make_deformed_family, make_template, write_family, FamilyManifest, FamilyParams};

use crate::CliError;

fn failed(e: morphospace::Error) -> CliError {
    CliError::Stage {
        stage: "fixtures".into(),
        specimen: None,
        message: e.to_string(),
    }
}

/// Generates a family from `params` at the given template resolution and
/// writes it to `dir`. Argument errors are configuration errors; a member
/// that folds over itself fails the stage.
pub fn generate(params: &FamilyParams, resolution: u32, dir: &Path) -> Result<FamilyManifest, CliError> {
    let template = make_template(params.kind, resolution).map_err(|e| match e {
        morphospace::Error::InvalidResolution(_) => CliError::Config(e.to_string()),
        e => failed(e),
    })?;
    let family = make_deformed_family(&template, params).map_err(|e| match e {
        morphospace::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
        e => failed(e),
    })?;
    write_family(&family, resolution, dir).map_err(failed)
}
