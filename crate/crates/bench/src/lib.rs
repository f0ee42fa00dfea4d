//! Fixtures shared by the benchmarks.

use morphospace::mesh::farthest_point_sample;
use morphospace::synthetic::{make_deformed_family, make_template, DeformedFamily, FamilyParams, TemplateKind};
use morphospace::SampleSet;

/// A small clustered sphere family at template resolution 3.
pub fn sphere_family(members: usize, seed: u64) -> DeformedFamily {
    let template = make_template(TemplateKind::Sphere, 3).expect("sphere template");
    let params = FamilyParams {
        members,
        clusters: 3,
        amplitude: 0.15,
        seed,
        ..Default::default()
    };
    make_deformed_family(&template, &params).expect("family")
}

/// Every member sampled at the same `n` template vertices.
pub fn shared_samples(family: &DeformedFamily, n: usize) -> Vec<SampleSet> {
    let vertices = farthest_point_sample(&family.template, n, 0)
        .expect("fps")
        .vertex_indices();
    family
        .members
        .iter()
        .map(|m| SampleSet::from_vertices(m, &vertices, 0).expect("samples"))
        .collect()
}
