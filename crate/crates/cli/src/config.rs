//! Pipeline configuration: a TOML file with sections, overridable by flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use morphospace::bundle::MatrixNorm;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Sample,
    Cpdist,
    Align,
    Diffuse,
    Hdm,
    Segment,
    Refine,
    Landmarks,
    Ariadne,
}

impl Stage {
    /// Canonical execution order.
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Sample,
        Stage::Cpdist,
        Stage::Align,
        Stage::Diffuse,
        Stage::Hdm,
        Stage::Segment,
        Stage::Refine,
        Stage::Landmarks,
        Stage::Ariadne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Sample => "sample",
            Stage::Cpdist => "cpdist",
            Stage::Align => "align",
            Stage::Diffuse => "diffuse",
            Stage::Hdm => "hdm",
            Stage::Segment => "segment",
            Stage::Refine => "refine",
            Stage::Landmarks => "landmarks",
            Stage::Ariadne => "ariadne",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Sample | Stage::Landmarks | Stage::Ariadne => &[Stage::Ingest],
            Stage::Cpdist => &[Stage::Sample],
            Stage::Align => &[Stage::Ingest, Stage::Cpdist],
            Stage::Diffuse => &[Stage::Cpdist],
            Stage::Hdm => &[Stage::Sample, Stage::Cpdist],
            Stage::Segment | Stage::Refine => &[Stage::Ingest, Stage::Sample, Stage::Cpdist, Stage::Hdm],
        }
    }

    /// Stages that need at least two meshes.
    pub fn is_collection(self) -> bool {
        !matches!(self, Stage::Ingest | Stage::Sample | Stage::Landmarks | Stage::Ariadne)
    }

    /// `stages` plus everything they depend on, in execution order.
    pub fn closure(stages: &[Stage]) -> Vec<Stage> {
        let mut wanted = std::collections::BTreeSet::new();
        let mut stack: Vec<Stage> = stages.to_vec();
        while let Some(s) = stack.pop() {
            if wanted.insert(s) {
                stack.extend_from_slice(s.dependencies());
            }
        }
        Stage::ALL.into_iter().filter(|s| wanted.contains(s)).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

/// A bandwidth given explicitly or tuned by the semigroup-error heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Auto,
    Fixed(f64),
}

impl FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Bandwidth::Auto);
        }
        s.parse()
            .map(Bandwidth::Fixed)
            .map_err(|_| format!("bandwidth must be a number or \"auto\", got '{s}'"))
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Auto => s.serialize_str("auto"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Bandwidth::Fixed(v)),
            Raw::Int(v) => Ok(Bandwidth::Fixed(v as f64)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Farthest-point sampling on every mesh independently.
    #[default]
    Fps,
    /// Farthest-point sampling on the first mesh, reused by vertex index on
    /// all meshes (they must share connectivity).
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub mode: SamplingMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 150,
            mode: SamplingMode::Fps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub cp_iters: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { cp_iters: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t: Bandwidth,
    pub gamma: f64,
    pub embed_dims: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t: Bandwidth::Auto,
            gamma: 1.0,
            embed_dims: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdmConfig {
    pub tau1: Bandwidth,
    pub tau2: Bandwidth,
    pub gamma: f64,
    /// Eigenvectors behind the HBDD features and the exported embedding.
    pub embed_dims: usize,
    pub segment_dims: usize,
    pub template_dims: usize,
    pub clusters: usize,
    pub norm: String,
    pub refine_neighbors: usize,
    pub refine_rounds: usize,
    pub joint_landmarks: usize,
}

impl Default for HdmConfig {
    fn default() -> Self {
        Self {
            tau1: Bandwidth::Auto,
            tau2: Bandwidth::Auto,
            gamma: 1.0,
            embed_dims: 10,
            segment_dims: 100,
            template_dims: 3,
            clusters: 12,
            norm: "frobenius".into(),
            refine_neighbors: 4,
            refine_rounds: 3,
            joint_landmarks: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkConfig {
    pub count: usize,
    pub spectral_count: usize,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            count: 10,
            spectral_count: morphospace::landmarking::DEFAULT_SPECTRAL_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvatureConfig {
    /// Fraction of the characteristic mesh diagonal.
    pub bandwidth: f64,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self { bandwidth: 0.08 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub sampling: SamplingConfig,
    pub registration: RegistrationConfig,
    pub diffusion: DiffusionConfig,
    pub hdm: HdmConfig,
    pub landmarks: LandmarkConfig,
    pub curvature: CurvatureConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("meshes"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            stages: Stage::ALL.to_vec(),
            sampling: SamplingConfig::default(),
            registration: RegistrationConfig::default(),
            diffusion: DiffusionConfig::default(),
            hdm: HdmConfig::default(),
            landmarks: LandmarkConfig::default(),
            curvature: CurvatureConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn bandwidth(name: &str, b: Bandwidth) -> Result<(), CliError> {
    match b {
        Bandwidth::Auto => Ok(()),
        Bandwidth::Fixed(v) => positive(name, v),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn norm(&self) -> Result<MatrixNorm, CliError> {
        self.hdm
            .norm
            .parse()
            .map_err(|e: morphospace::Error| CliError::Config(e.to_string()))
    }

    /// Checks value ranges and the input directory before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.stages.is_empty() {
            return Err(CliError::Config("no stages requested".into()));
        }
        if !self.input_dir.is_dir() {
            return Err(CliError::Config(format!(
                "input directory {} does not exist",
                self.input_dir.display()
            )));
        }
        let counts = [
            ("sampling.n_samples", self.sampling.n_samples),
            ("registration.cp_iters", self.registration.cp_iters),
            ("diffusion.embed_dims", self.diffusion.embed_dims),
            ("hdm.embed_dims", self.hdm.embed_dims),
            ("hdm.segment_dims", self.hdm.segment_dims),
            ("hdm.template_dims", self.hdm.template_dims),
            ("hdm.clusters", self.hdm.clusters),
            ("hdm.refine_neighbors", self.hdm.refine_neighbors),
            ("hdm.refine_rounds", self.hdm.refine_rounds),
            ("hdm.joint_landmarks", self.hdm.joint_landmarks),
            ("landmarks.count", self.landmarks.count),
            ("landmarks.spectral_count", self.landmarks.spectral_count),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        positive("diffusion.gamma", self.diffusion.gamma)?;
        positive("hdm.gamma", self.hdm.gamma)?;
        positive("curvature.bandwidth", self.curvature.bandwidth)?;
        bandwidth("diffusion.t", self.diffusion.t)?;
        bandwidth("hdm.tau1", self.hdm.tau1)?;
        bandwidth("hdm.tau2", self.hdm.tau2)?;
        self.norm()?;
        Ok(())
    }
}
