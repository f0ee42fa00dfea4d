//! Ground-truth fixtures: parametric template surfaces, deformed families
//! with known correspondences, and corrupted correspondence maps.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{write_ply, TriMesh, VertexProperties};
use crate::registration::CorrespondenceMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Sphere,
    Dumbbell,
    BumpyDisc,
}

impl std::str::FromStr for TemplateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "dumbbell" => Ok(Self::Dumbbell),
            "bumpy_disc" | "disc" => Ok(Self::BumpyDisc),
            other => Err(Error::InvalidArgument(format!("unknown template kind '{other}'"))),
        }
    }
}

/// Regular icosahedron inscribed in the unit sphere.
pub fn icosahedron() -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let vertices = raw
        .iter()
        .map(|p| Point3::from(Vector3::new(p[0], p[1], p[2]).normalize()))
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    TriMesh::new("icosahedron", vertices, faces).expect("static connectivity")
}

/// Unit sphere by repeated 4-to-1 subdivision of the icosahedron;
/// `10 * 4^level + 2` vertices.
pub fn icosphere(level: u32) -> TriMesh {
    let base = icosahedron();
    let mut vertices: Vec<Point3<f64>> = base.vertices().to_vec();
    let mut faces = base.faces().to_vec();
    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point3<f64>>| {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let p = ((vertices[a].coords + vertices[b].coords) * 0.5).normalize();
                vertices.push(Point3::from(p));
                vertices.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh::new(format!("icosphere_{level}"), vertices, faces).expect("valid subdivision")
}

/// Unit sphere from a subdivided cube projected radially: `12 n^2` faces.
/// A mesh structure unrelated to the icosphere, used for remeshing checks.
pub fn cube_sphere(n: usize) -> Result<TriMesh> {
    if n == 0 {
        return Err(Error::InvalidResolution("cube sphere needs n >= 1".into()));
    }
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let half = n as i64;
    let mut vid = |g: [i64; 3], vertices: &mut Vec<Point3<f64>>| {
        *index.entry(g).or_insert_with(|| {
            // equal-angle warp keeps cells closer to uniform after projection
            let w = |c: i64| ((c as f64 / half as f64) * PI / 4.0).tan();
            let p = Vector3::new(w(g[0]), w(g[1]), w(g[2])).normalize();
            vertices.push(Point3::from(p));
            vertices.len() - 1
        })
    };
    for axis in 0..3 {
        for sign in [-1i64, 1] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..n as i64 {
                for j in 0..n as i64 {
                    let corner = |di: i64, dj: i64| {
                        let mut g = [0i64; 3];
                        g[axis] = sign * half;
                        g[u] = -half + 2 * (i + di);
                        g[v] = -half + 2 * (j + dj);
                        g
                    };
                    let a = vid(corner(0, 0), &mut vertices);
                    let b = vid(corner(1, 0), &mut vertices);
                    let c = vid(corner(1, 1), &mut vertices);
                    let d = vid(corner(0, 1), &mut vertices);
                    if sign > 0 {
                        faces.push([a, b, c]);
                        faces.push([a, c, d]);
                    } else {
                        faces.push([a, c, b]);
                        faces.push([a, d, c]);
                    }
                }
            }
        }
    }
    // the grid uses steps of 2 on a [-n, n] lattice scaled by 1/n
    TriMesh::new(format!("cube_sphere_{n}"), vertices, faces)
}

/// Radius of the dumbbell (a Cassini oval of revolution about x) in the
/// direction `u`.
fn dumbbell_radius(u: &Vector3<f64>) -> f64 {
    const E: f64 = 1.15;
    let cos2 = 2.0 * u.x * u.x - 1.0;
    let sin2_sq = 1.0 - cos2 * cos2;
    (cos2 + (E.powi(4) - sin2_sq).sqrt()).sqrt()
}

/// Polar-grid disc of radius 1 with `rings` rings and a smooth bump field.
fn bumpy_disc(rings: usize) -> TriMesh {
    let mut vertices = vec![Point3::new(0.0, 0.0, bump(0.0, 0.0))];
    let mut ring_start = vec![0usize];
    for r in 1..=rings {
        ring_start.push(vertices.len());
        let count = 6 * r;
        let rad = r as f64 / rings as f64;
        for k in 0..count {
            let th = 2.0 * PI * k as f64 / count as f64;
            let (x, y) = (rad * th.cos(), rad * th.sin());
            vertices.push(Point3::new(x, y, bump(x, y)));
        }
    }
    let mut faces = Vec::new();
    for r in 1..=rings {
        let inner_count = if r == 1 { 1 } else { 6 * (r - 1) };
        let outer_count = 6 * r;
        let inner = |k: usize| if r == 1 { 0 } else { ring_start[r - 1] + k % inner_count };
        let outer = |k: usize| ring_start[r] + k % outer_count;
        // walk both rings in angle order, emitting triangles
        let (mut i, mut o) = (0usize, 0usize);
        while i < inner_count || o < outer_count {
            let ang_i = (i as f64 + 0.5) / inner_count as f64;
            let ang_o = (o as f64 + 0.5) / outer_count as f64;
            if r == 1 || (o < outer_count && (i >= inner_count || ang_o <= ang_i)) {
                faces.push([inner(i), outer(o), outer(o + 1)]);
                o += 1;
                if r == 1 && o == outer_count {
                    break;
                }
            } else {
                faces.push([inner(i), outer(o), inner(i + 1)]);
                i += 1;
            }
        }
    }
    TriMesh::new("bumpy_disc", vertices, faces).expect("valid disc")
}

fn bump(x: f64, y: f64) -> f64 {
    0.12 * (-(x - 0.3).powi(2) / 0.05 - (y - 0.2).powi(2) / 0.05).exp()
        + 0.08 * (-(x + 0.35).powi(2) / 0.04 - (y + 0.25).powi(2) / 0.06).exp()
}

/// Builds a template surface. For the closed kinds `resolution` is the
/// icosphere subdivision level (>= 2, i.e. at least 162 vertices); for the
/// disc it is the ring count exponent (`2^resolution` rings, >= 2).
pub fn make_template(kind: TemplateKind, resolution: u32) -> Result<TriMesh> {
    if !(2..=8).contains(&resolution) {
        return Err(Error::InvalidResolution(format!(
            "resolution {resolution} outside 2..=8"
        )));
    }
    let mut mesh = match kind {
        TemplateKind::Sphere => icosphere(resolution),
        TemplateKind::Dumbbell => {
            icosphere(resolution).map_positions(|p| Point3::from(p.coords * dumbbell_radius(&p.coords)))
        }
        TemplateKind::BumpyDisc => bumpy_disc(1 << resolution),
    };
    mesh.set_id(match kind {
        TemplateKind::Sphere => "sphere",
        TemplateKind::Dumbbell => "dumbbell",
        TemplateKind::BumpyDisc => "bumpy_disc",
    });
    Ok(mesh)
}

/// Analytic surface area of the unit-sphere template (other kinds have no
/// closed form).
pub fn analytic_area(kind: TemplateKind) -> Option<f64> {
    match kind {
        TemplateKind::Sphere => Some(4.0 * PI),
        _ => None,
    }
}

/// Real, orthonormal spherical harmonics of degree `2..=degree` at unit
/// direction `u`, ordered by (l, m) with m from -l to l.
pub fn spherical_harmonics(u: &Vector3<f64>, degree: usize) -> Vec<f64> {
    let cos_t = u.z.clamp(-1.0, 1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = u.y.atan2(u.x);
    let mut out = Vec::new();
    for l in 2..=degree {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let p = assoc_legendre(l, am, cos_t, sin_t);
            let norm = (((2 * l + 1) as f64 / (4.0 * PI)) * factorial_ratio(l - am, l + am)).sqrt();
            let y = if m > 0 {
                2f64.sqrt() * norm * p * (am as f64 * phi).cos()
            } else if m < 0 {
                2f64.sqrt() * norm * p * (am as f64 * phi).sin()
            } else {
                norm * p
            };
            out.push(y);
        }
    }
    out
}

pub fn harmonic_count(degree: usize) -> usize {
    (2..=degree).map(|l| 2 * l + 1).sum()
}

/// (a)! / (b)! for a <= b.
fn factorial_ratio(a: usize, b: usize) -> f64 {
    ((a + 1)..=b).fold(1.0, |acc, k| acc / k as f64)
}

/// Associated Legendre function P_l^m(x) without the Condon-Shortley phase.
fn assoc_legendre(l: usize, m: usize, x: f64, s: f64) -> f64 {
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= fact * s;
        fact += 2.0;
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = (x * (2 * ll - 1) as f64 * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Monomials x^i y^j with 2 <= i + j <= degree.
fn planar_basis(x: f64, y: f64, degree: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for total in 2..=degree {
        for i in 0..=total {
            out.push(x.powi(i as i32) * y.powi((total - i) as i32));
        }
    }
    out
}

fn planar_count(degree: usize) -> usize {
    (2..=degree).map(|t| t + 1).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub kind: TemplateKind,
    pub members: usize,
    /// Overall displacement scale.
    pub amplitude: f64,
    /// Highest harmonic degree (closed surfaces) or polynomial degree (disc).
    pub degree: usize,
    /// Number of planted clusters; 0 for an unstructured family.
    pub clusters: usize,
    /// Within-cluster spread relative to the unit-norm cluster centers.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            kind: TemplateKind::Sphere,
            members: 5,
            amplitude: 0.05,
            degree: 3,
            clusters: 0,
            cluster_spread: 0.25,
            seed: 0,
        }
    }
}

/// Template warped per member; all members share the template's faces, so
/// vertex `i` of every member corresponds to vertex `i` of the template.
#[derive(Debug, Clone)]
pub struct DeformedFamily {
    pub template: TriMesh,
    pub members: Vec<TriMesh>,
    /// Per-member deformation coefficients (the base-manifold coordinate).
    pub coefficients: Vec<Vec<f64>>,
    /// Planted cluster of each member (all zero without clusters).
    pub labels: Vec<usize>,
    pub params: FamilyParams,
}

impl DeformedFamily {
    /// Ground-truth vertex map between two members: the identity.
    pub fn true_map(&self, from: usize, to: usize) -> CorrespondenceMap {
        CorrespondenceMap::identity(
            self.members[from].id(),
            self.members[to].id(),
            self.template.vertex_count(),
        )
    }
}

fn displacement_basis(template: &TriMesh, kind: TemplateKind, degree: usize) -> Vec<(Vec<f64>, Vector3<f64>)> {
    template
        .vertices()
        .iter()
        .map(|p| match kind {
            TemplateKind::Sphere | TemplateKind::Dumbbell => {
                let u = p.coords.normalize();
                (spherical_harmonics(&u, degree), u)
            }
            TemplateKind::BumpyDisc => (planar_basis(p.x, p.y, degree), Vector3::z()),
        })
        .collect()
}

/// Adds isotropic Gaussian noise with standard deviation
/// `sigma_fraction` times the bounding-box diagonal to every vertex.
pub fn perturb_vertices(m: &TriMesh, sigma_fraction: f64, seed: u64) -> TriMesh {
    let sigma = sigma_fraction * m.bbox_diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    };
    let positions = m
        .vertices()
        .iter()
        .map(|p| p + Vector3::new(draw(), draw(), draw()))
        .collect();
    m.with_positions(positions).expect("same vertex count")
}

/// Triangles whose orientation reverses between two embeddings of the same
/// connectivity.
pub fn count_flipped(before: &TriMesh, after: &TriMesh) -> usize {
    (0..before.face_count())
        .filter(|&f| before.face_cross(f).dot(&after.face_cross(f)) <= 0.0)
        .count()
}

pub fn make_deformed_family(template: &TriMesh, params: &FamilyParams) -> Result<DeformedFamily> {
    if params.members == 0 {
        return Err(Error::InvalidArgument("family needs at least one member".into()));
    }
    if params.degree < 2 {
        return Err(Error::InvalidArgument("deformation degree must be >= 2".into()));
    }
    if !(params.amplitude >= 0.0) {
        return Err(Error::InvalidArgument("amplitude must be nonnegative".into()));
    }
    let dim = match params.kind {
        TemplateKind::Sphere | TemplateKind::Dumbbell => harmonic_count(params.degree),
        TemplateKind::BumpyDisc => planar_count(params.degree),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let centers: Vec<Vec<f64>> = (0..params.clusters)
        .map(|_| {
            let c = gauss(&mut rng);
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            c.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut coefficients = Vec::with_capacity(params.members);
    let mut labels = Vec::with_capacity(params.members);
    for k in 0..params.members {
        let z = gauss(&mut rng);
        let coeffs: Vec<f64> = if centers.is_empty() {
            labels.push(0);
            z.iter().map(|x| params.amplitude * x * scale).collect()
        } else {
            let c = k % centers.len();
            labels.push(c);
            centers[c]
                .iter()
                .zip(&z)
                .map(|(m, x)| params.amplitude * (m + params.cluster_spread * x * scale))
                .collect()
        };
        coefficients.push(coeffs);
    }

    let basis = displacement_basis(template, params.kind, params.degree);
    let mut members = Vec::with_capacity(params.members);
    for (k, coeffs) in coefficients.iter().enumerate() {
        let positions = template
            .vertices()
            .iter()
            .zip(&basis)
            .map(|(p, (values, dir))| {
                let h: f64 = values.iter().zip(coeffs).map(|(b, c)| b * c).sum();
                p + dir * h
            })
            .collect();
        let mut member = template.with_positions(positions)?;
        member.set_id(format!("member_{k:03}"));
        let flips = count_flipped(template, &member);
        if flips > 0 {
            return Err(Error::SelfIntersection(flips));
        }
        members.push(member);
    }
    Ok(DeformedFamily {
        template: template.clone(),
        members,
        coefficients,
        labels,
        params: params.clone(),
    })
}

/// Displaces `fraction` of the assignments through disjoint random
/// transpositions; the result is still a bijection.
pub fn corrupt_maps(map: &CorrespondenceMap, fraction: f64, seed: u64) -> CorrespondenceMap {
    let n = map.len();
    let fraction = fraction.clamp(0.0, 1.0);
    let pairs = ((fraction * n as f64).round() as usize / 2).min(n / 2);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut assignment = map.assignment.clone();
    for p in 0..pairs {
        assignment.swap(idx[2 * p], idx[2 * p + 1]);
    }
    CorrespondenceMap::new(&map.from_id, &map.to_id, assignment).expect("swaps keep a bijection")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyManifest {
    pub params: FamilyParams,
    pub resolution: u32,
    pub members: Vec<String>,
    pub labels: Vec<usize>,
    pub coefficients: Vec<Vec<f64>>,
    pub true_maps: String,
}

/// Writes one PLY per member and `manifest.json`.
pub fn write_family(family: &DeformedFamily, resolution: u32, dir: &Path) -> Result<FamilyManifest> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for m in &family.members {
        let name = format!("{}.ply", m.id());
        let mut buf = Vec::new();
        write_ply(m, &VertexProperties::default(), &mut buf)?;
        std::fs::write(dir.join(&name), buf)?;
        names.push(name);
    }
    let manifest = FamilyManifest {
        params: family.params.clone(),
        resolution,
        members: names,
        labels: family.labels.clone(),
        coefficients: family.coefficients.clone(),
        true_maps: "members share the template connectivity; vertex i corresponds to vertex i".into(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}
