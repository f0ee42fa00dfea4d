//! Dirichlet normal energy: the classic per-face estimate and the robust
//! weighted-PCA variant (ariaDNE).

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{vertex_normals, TriMesh};

/// Default ariaDNE bandwidth as a fraction of the mesh size.
pub const DEFAULT_BANDWIDTH: f64 = 0.08;

/// Gaussian weights below exp(-CUTOFF²) of the peak are dropped.
const CUTOFF: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub vertex: usize,
    pub tangent1: Vector3<f64>,
    pub tangent2: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Normal-direction variance over total variance of the weighted
    /// neighbourhood; zero on planes.
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureField {
    pub mesh_id: String,
    pub per_vertex_energy: Vec<f64>,
    /// Surface area attributed to each vertex.
    pub vertex_areas: Vec<f64>,
    /// Sum of per-vertex energies weighted by `vertex_areas`.
    pub total: f64,
    /// Bandwidth as a fraction of the mesh size (0 for classic DNE).
    pub bandwidth: f64,
    /// Vertices whose neighbourhood was too degenerate to fit a frame; their
    /// energy is reported as zero.
    pub degenerate_count: usize,
}

/// Rotation-invariant mesh size used to scale the bandwidth: the diagonal
/// of the cube whose half-width is the area-weighted RMS distance to the
/// centroid (equal to the bounding-box diagonal on a sphere).
pub fn characteristic_diagonal(m: &TriMesh) -> f64 {
    let areas = m.vertex_areas();
    let total: f64 = areas.iter().sum();
    let c = m.centroid();
    let ms: f64 = m
        .vertices()
        .iter()
        .zip(&areas)
        .map(|(p, a)| a * (p - c).norm_squared())
        .sum::<f64>()
        / total;
    2.0 * 3f64.sqrt() * ms.sqrt()
}

/// Uniform hash grid for fixed-radius neighbour queries.
struct NeighborGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> NeighborGrid<'a> {
    fn new(points: &'a [Point3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Calls `visit` for every point within `radius` (<= cell size) of `q`.
    fn for_each_within(&self, q: &Point3<f64>, radius: f64, mut visit: impl FnMut(usize, Vector3<f64>)) {
        let k = Self::key(q, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &i in list {
                            let d = self.points[i] - q;
                            if d.norm_squared() <= r2 {
                                visit(i, d);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct PcaContext<'a> {
    mesh: &'a TriMesh,
    areas: Vec<f64>,
    grid: NeighborGrid<'a>,
    eps: f64,
}

impl<'a> PcaContext<'a> {
    fn new(mesh: &'a TriMesh, eps: f64) -> Self {
        let radius = CUTOFF * eps;
        Self {
            mesh,
            areas: mesh.vertex_areas(),
            grid: NeighborGrid::new(mesh.vertices(), radius),
            eps,
        }
    }

    fn frame(&self, vertex: usize, reference: &Vector3<f64>) -> Result<LocalFrame> {
        let pts = self.mesh.vertices();
        let center = pts[vertex];
        let inv = 1.0 / (self.eps * self.eps);
        // moments of offsets from the centre vertex
        let mut total = 0.0;
        let mut first = Vector3::zeros();
        let mut second = Matrix3::zeros();
        self.grid.for_each_within(&center, CUTOFF * self.eps, |j, d| {
            let w = self.areas[j] * (-d.norm_squared() * inv).exp();
            total += w;
            first += d * w;
            second += d * d.transpose() * w;
        });
        if !(total > 0.0) {
            return Err(Error::DegenerateNeighborhood(vertex));
        }
        let mean = first / total;
        let cov = second / total - mean * mean.transpose();
        let eig = cov.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        if !(values[1] > 1e-12 * values[0]) || values[0] <= 0.0 {
            return Err(Error::DegenerateNeighborhood(vertex));
        }
        let vectors: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
        let normal_slot = (0..3)
            .max_by(|&a, &b| {
                vectors[a]
                    .dot(reference)
                    .abs()
                    .total_cmp(&vectors[b].dot(reference).abs())
                    .then(a.cmp(&b))
            })
            .unwrap();
        let mut normal = vectors[normal_slot];
        if normal.dot(reference) < 0.0 {
            normal = -normal;
        }
        let t1 = vectors[if normal_slot == 0 { 1 } else { 0 }];
        let tangent1 = (t1 - normal * normal.dot(&t1)).normalize();
        let tangent2 = normal.cross(&tangent1);
        let kappa = values[normal_slot] / values.iter().sum::<f64>();
        Ok(LocalFrame {
            vertex,
            tangent1,
            tangent2,
            normal,
            kappa,
        })
    }
}

/// Gaussian-weighted principal frame at `vertex` with absolute bandwidth
/// `eps`. Weights are exp(-d²/eps²) times the lumped vertex area.
pub fn local_weighted_pca(m: &TriMesh, vertex: usize, eps: f64) -> Result<LocalFrame> {
    if !(eps > 0.0) {
        return Err(Error::InvalidBandwidth(eps));
    }
    if vertex >= m.vertex_count() {
        return Err(Error::IndexOutOfRange {
            index: vertex,
            size: m.vertex_count(),
        });
    }
    let reference = reference_normals(m)[vertex].ok_or(Error::DegenerateNeighborhood(vertex))?;
    PcaContext::new(m, eps).frame(vertex, &reference)
}

/// Angle-weighted vertex normals where defined.
fn reference_normals(m: &TriMesh) -> Vec<Option<Vector3<f64>>> {
    match vertex_normals(m) {
        Ok(n) => n
            .into_iter()
            .map(|v| v.iter().all(|c| c.is_finite()).then_some(v))
            .collect(),
        Err(_) => {
            // some vertex is isolated or all its faces are degenerate; fall
            // back to per-vertex accumulation that tolerates that
            let mut acc = vec![Vector3::zeros(); m.vertex_count()];
            for (f, face) in m.faces().iter().enumerate() {
                let n = m.face_cross(f);
                for &v in face {
                    acc[v] += n;
                }
            }
            acc.into_iter().map(|v| v.try_normalize(1e-300)).collect()
        }
    }
}

/// ariaDNE with bandwidth `fraction` times [`characteristic_diagonal`].
/// The per-vertex energy 8κ/ε² estimates the squared norm of the shape
/// operator (κ ≈ ε²(k1² + k2²)/8 for smooth patches), so the total
/// approximates the integral of |dn|².
pub fn aria_dne(m: &TriMesh, fraction: f64) -> Result<CurvatureField> {
    if !(fraction > 0.0) {
        return Err(Error::InvalidBandwidth(fraction));
    }
    if m.face_count() == 0 {
        return Err(Error::EmptyMesh);
    }
    let eps = fraction * characteristic_diagonal(m);
    if !(eps > 0.0) {
        return Err(Error::EmptyMesh);
    }
    let refs = reference_normals(m);
    let ctx = PcaContext::new(m, eps);
    let used = {
        let mut used = vec![false; m.vertex_count()];
        for f in m.faces() {
            for &v in f {
                used[v] = true;
            }
        }
        used
    };
    let incident = m.vertex_faces();
    let lumped = &ctx.areas;
    // energy and area per vertex; the area is the vertex's third of its
    // incident triangles projected onto the fitted tangent plane, which
    // unlike the raw area does not grow under vertex noise
    let results: Vec<Option<(f64, f64)>> = (0..m.vertex_count())
        .into_par_iter()
        .map(|v| {
            if !used[v] {
                return Some((0.0, 0.0));
            }
            let frame = ctx.frame(v, &refs[v]?).ok()?;
            let area = incident[v]
                .iter()
                .map(|&f| m.face_cross(f).dot(&frame.normal).abs())
                .sum::<f64>()
                / 6.0;
            Some((8.0 * frame.kappa / (eps * eps), area))
        })
        .collect();
    let degenerate_count = results.iter().filter(|f| f.is_none()).count();
    if degenerate_count > 0 {
        log::warn!("{}: {degenerate_count} vertices with degenerate neighbourhoods", m.id());
    }
    let (per_vertex_energy, vertex_areas): (Vec<f64>, Vec<f64>) = results
        .into_iter()
        .zip(lumped)
        .map(|(r, a)| r.unwrap_or((0.0, *a)))
        .unzip();
    let total = per_vertex_energy.iter().zip(&vertex_areas).map(|(e, a)| e * a).sum();
    Ok(CurvatureField {
        mesh_id: m.id().to_string(),
        per_vertex_energy,
        vertex_areas,
        total,
        bandwidth: fraction,
        degenerate_count,
    })
}

/// Classic DNE: Dirichlet energy of the piecewise-linear interpolation of
/// the angle-weighted vertex normals.
pub fn dne(m: &TriMesh) -> Result<CurvatureField> {
    if m.face_count() == 0 {
        return Err(Error::EmptyMesh);
    }
    let normals = vertex_normals(m)?;
    let areas = m.vertex_areas();
    let mut accumulated = vec![0.0; m.vertex_count()];
    let mut total = 0.0;
    for (f, face) in m.faces().iter().enumerate() {
        let [a, b, c] = m.face_corners(f);
        let double_area = m.face_cross(f).norm();
        if !(double_area > 0.0) {
            continue;
        }
        // cot of the angle at each corner, opposite the edge of the other two
        let cot = |p: &Point3<f64>, q: &Point3<f64>, r: &Point3<f64>| (q - p).dot(&(r - p)) / double_area;
        let corners = [(a, b, c), (b, c, a), (c, a, b)];
        let mut energy = 0.0;
        for (k, (p, q, r)) in corners.iter().enumerate() {
            let (i, j) = (face[(k + 1) % 3], face[(k + 2) % 3]);
            energy += 0.5 * cot(p, q, r) * (normals[i] - normals[j]).norm_squared();
        }
        total += energy;
        for &v in face {
            accumulated[v] += energy / 3.0;
        }
    }
    let per_vertex_energy = accumulated
        .iter()
        .zip(&areas)
        .map(|(e, a)| if *a > 0.0 { e / a } else { 0.0 })
        .collect();
    Ok(CurvatureField {
        mesh_id: m.id().to_string(),
        per_vertex_energy,
        vertex_areas: areas,
        total,
        bandwidth: 0.0,
        degenerate_count: 0,
    })
}
