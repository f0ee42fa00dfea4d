//! Shape-space analysis of triangle-mesh surface collections: registration
//! and distances, diffusion and horizontal (fiber-bundle) diffusion maps,
//! collection segmentation, automatic landmarking and curvature energies.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod cluster;
pub mod curvature;
pub mod diffusion;
pub mod error;
pub mod export;
pub mod landmarking;
pub mod linalg;
pub mod mesh;
pub mod registration;
pub mod synthetic;

pub use error::{Error, Result};
pub use mesh::{DiagnosticsReport, SampleSet, TriMesh};
pub use registration::{CorrespondenceMap, DistanceGraph, LandmarkPairs, RigidMotion};
