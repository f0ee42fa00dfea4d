//! Horizontal diffusion on the fiber bundle of a surface collection: each
//! surface is a fiber of sample points, correspondence maps connect fibers
//! and shape distances weight the jumps between them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Point3};
use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::kmeans;
use crate::diffusion::{
    pick_time, semigroup_point, spectral_decompose, DiffusionOperator, SpectralBasis, MIN_OFF_DIAGONAL_MASS, TRUNCATION,
};
use crate::error::{Error, Result};
use crate::landmarking::{gaussian_covariance, gp_landmarks, LandmarkSet};
use crate::linalg::{frobenius_norm, spectral_norm};
use crate::mesh::SampleSet;
use crate::registration::{CorrespondenceMap, DistanceGraph};

/// Embedding dimension used for the template surface and refinement.
pub const TEMPLATE_DIMS: usize = 3;
/// Embedding dimension used for segmentation.
pub const SEGMENT_DIMS: usize = 100;
pub const SEGMENT_CLUSTERS: usize = 12;
pub const KMEANS_RESTARTS: usize = 10;
/// Neighbors combined by one refinement step.
pub const REFINE_NEIGHBORS: usize = 4;
pub const REFINE_ROUNDS: usize = 3;
const MAX_REFINE_NEIGHBORS: usize = 12;

/// A map from the points of one fiber to weighted combinations of the
/// points of another. Hard correspondences have a single unit weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoftMap {
    pub from_id: String,
    pub to_id: String,
    /// Per source point, (target index, weight) pairs with weights summing to 1.
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl SoftMap {
    pub fn from_hard(map: &CorrespondenceMap) -> Self {
        Self {
            from_id: map.from_id.clone(),
            to_id: map.to_id.clone(),
            weights: map.assignment.iter().map(|&j| vec![(j, 1.0)]).collect(),
        }
    }

    pub fn identity(id: &str, n: usize) -> Self {
        Self::from_hard(&CorrespondenceMap::identity(id, id, n))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Image of source point `i` among `target` positions.
    pub fn image(&self, i: usize, target: &[Point3<f64>]) -> Point3<f64> {
        let mut acc = nalgebra::Vector3::zeros();
        for &(j, w) in &self.weights[i] {
            acc += w * target[j].coords;
        }
        Point3::from(acc)
    }

    pub fn images(&self, target: &[Point3<f64>]) -> Vec<Point3<f64>> {
        (0..self.len()).map(|i| self.image(i, target)).collect()
    }

    /// Target index carrying the largest weight (lowest index on ties).
    pub fn dominant(&self, i: usize) -> usize {
        self.weights[i]
            .iter()
            .fold((usize::MAX, f64::NEG_INFINITY), |best, &(j, w)| {
                if w > best.1 || (w == best.1 && j < best.0) {
                    (j, w)
                } else {
                    best
                }
            })
            .0
    }
}

/// Maps for every ordered pair of fibers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleMaps {
    pub maps: BTreeMap<(usize, usize), SoftMap>,
}

impl BundleMaps {
    /// Hard maps keyed by (from, to). A missing direction is filled with the
    /// inverse of the opposite one.
    pub fn from_hard(maps: &BTreeMap<(usize, usize), CorrespondenceMap>) -> Self {
        let mut out = BTreeMap::new();
        for (&(a, b), m) in maps {
            out.insert((a, b), SoftMap::from_hard(m));
            out.entry((b, a)).or_insert_with(|| SoftMap::from_hard(&m.inverse()));
        }
        Self { maps: out }
    }

    /// Index-aligned maps between all fibers.
    pub fn identity(samples: &[SampleSet]) -> Self {
        let mut maps = BTreeMap::new();
        for (a, sa) in samples.iter().enumerate() {
            for (b, sb) in samples.iter().enumerate() {
                if a != b {
                    let m = CorrespondenceMap::identity(&sa.mesh_id, &sb.mesh_id, sa.len());
                    maps.insert((a, b), SoftMap::from_hard(&m));
                }
            }
        }
        Self { maps }
    }

    pub fn get(&self, from: usize, to: usize) -> Result<&SoftMap> {
        self.maps.get(&(from, to)).ok_or(Error::MissingMap(from, to))
    }
}

/// Row-stochastic bundle kernel in K x K blocks of N x N; flat index
/// `k * N + i` is point `i` of fiber `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleOperator {
    pub operator: DiffusionOperator,
    pub tau1: f64,
    pub tau2: f64,
    pub ids: Vec<String>,
    pub fiber_len: usize,
}

impl BundleOperator {
    pub fn w(&self) -> &DMatrix<f64> {
        &self.operator.h
    }

    pub fn fiber_count(&self) -> usize {
        self.ids.len()
    }

    pub fn flat(&self, fiber: usize, point: usize) -> usize {
        fiber * self.fiber_len + point
    }

    pub fn unflat(&self, index: usize) -> (usize, usize) {
        (index / self.fiber_len, index % self.fiber_len)
    }

    pub fn block(&self, row_fiber: usize, col_fiber: usize) -> DMatrix<f64> {
        let n = self.fiber_len;
        self.w().view((row_fiber * n, col_fiber * n), (n, n)).into_owned()
    }

    /// Mean over rows of the transition mass leaving the row's own fiber.
    pub fn off_diagonal_mass(&self) -> f64 {
        let w = self.w();
        let total: f64 = (0..w.nrows())
            .map(|r| {
                let (k, _) = self.unflat(r);
                let own: f64 = w.view((r, k * self.fiber_len), (1, self.fiber_len)).sum();
                1.0 - own
            })
            .sum();
        total / w.nrows() as f64
    }
}

fn check_bandwidth(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidBandwidth(tau));
    }
    Ok(())
}

fn fiber_len(samples: &[SampleSet]) -> Result<usize> {
    let n = samples
        .first()
        .map(|s| s.len())
        .ok_or(Error::TooFewPoints { needed: 1, got: 0 })?;
    if let Some(s) = samples.iter().find(|s| s.len() != n) {
        return Err(Error::LengthMismatch(n, s.len()));
    }
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    Ok(n)
}

/// Bundle kernel: for row point `j` of fiber `l` and column point `i` of
/// fiber `k`,
/// `exp(-(|P_lk(x_lj) - x_ki|² + |x_lj - P_kl(x_ki)|²) / 4τ1) · exp(-D_lk² / 2τ2)`,
/// then row-normalized over all columns. Diagonal blocks use identity maps
/// and zero distance.
pub fn assemble_hdm(
    samples: &[SampleSet],
    maps: &BundleMaps,
    g: &DistanceGraph,
    tau1: f64,
    tau2: f64,
) -> Result<BundleOperator> {
    check_bandwidth(tau1)?;
    check_bandwidth(tau2)?;
    let n = fiber_len(samples)?;
    let k = samples.len();
    if g.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} fibers but a {}-specimen distance graph",
            k,
            g.len()
        )));
    }
    let positions: Vec<Vec<Point3<f64>>> = samples.iter().map(|s| s.positions()).collect();
    // images[a][b][j]: point j of fiber a carried onto fiber b
    let mut images: Vec<Vec<Vec<Point3<f64>>>> = vec![vec![Vec::new(); k]; k];
    for a in 0..k {
        for b in 0..k {
            images[a][b] = if a == b {
                positions[a].clone()
            } else {
                let m = maps.get(a, b)?;
                if m.len() != n {
                    return Err(Error::LengthMismatch(n, m.len()));
                }
                m.images(&positions[b])
            };
        }
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
    let blocks: Vec<DMatrix<f64>> = pairs
        .par_iter()
        .map(|&(l, kk)| {
            let base = (-g.d[(l, kk)].powi(2) / (2.0 * tau2)).exp();
            DMatrix::from_fn(n, n, |j, i| {
                let fwd = (images[l][kk][j] - positions[kk][i]).norm_squared();
                let back = (positions[l][j] - images[kk][l][i]).norm_squared();
                let w = (-(fwd + back) / (4.0 * tau1)).exp() * base;
                if w < TRUNCATION {
                    0.0
                } else {
                    w
                }
            })
        })
        .collect();
    let mut kernel = DMatrix::zeros(k * n, k * n);
    for (&(l, kk), block) in pairs.iter().zip(&blocks) {
        kernel.view_mut((l * n, kk * n), (n, n)).copy_from(block);
        if l != kk {
            kernel.view_mut((kk * n, l * n), (n, n)).copy_from(&block.transpose());
        }
    }
    let operator = DiffusionOperator::from_kernel(kernel, tau1)?;
    Ok(BundleOperator {
        operator,
        tau1,
        tau2,
        ids: samples.iter().map(|s| s.mesh_id.clone()).collect(),
        fiber_len: n,
    })
}

/// Per-fiber slices of the leading nontrivial bundle eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HdmEmbedding {
    pub ids: Vec<String>,
    /// λ_1..λ_L.
    pub eigenvalues: Vec<f64>,
    pub gamma: f64,
    /// Raw eigenvector segments ψ_{l,k}, one N x L matrix per fiber.
    pub segments: Vec<DMatrix<f64>>,
    /// Segments with column l scaled by λ_l^{γ/2}.
    pub coordinates: Vec<DMatrix<f64>>,
}

impl HdmEmbedding {
    pub fn dims(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn fiber_count(&self) -> usize {
        self.ids.len()
    }

    pub fn fiber_len(&self) -> usize {
        self.coordinates.first().map_or(0, |c| c.nrows())
    }

    /// All fibers' coordinates stacked in fiber order.
    pub fn pooled(&self) -> DMatrix<f64> {
        let n = self.fiber_len();
        let mut out = DMatrix::zeros(n * self.fiber_count(), self.dims());
        for (k, c) in self.coordinates.iter().enumerate() {
            out.view_mut((k * n, 0), (n, self.dims())).copy_from(c);
        }
        out
    }
}

/// λ^{γ/2} with negative eigenvalues clamped to zero.
fn half_weight(lambda: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        lambda.max(0.0).powf(gamma / 2.0)
    }
}

/// Spectral decomposition of the bundle operator, sliced per fiber.
/// γ = 0 gives the unscaled eigenvectors.
pub fn hdm_embed(op: &BundleOperator, dims: usize, gamma: f64) -> Result<(SpectralBasis, HdmEmbedding)> {
    if dims == 0 || dims >= op.operator.len() {
        return Err(Error::InvalidArgument(format!(
            "{dims} embedding dimensions for {} points",
            op.operator.len()
        )));
    }
    let basis = spectral_decompose(&op.operator, dims)?;
    let n = op.fiber_len;
    let eigenvalues = basis.eigenvalues[1..].to_vec();
    let segments: Vec<DMatrix<f64>> = (0..op.fiber_count())
        .map(|k| basis.vectors.view((k * n, 1), (n, dims)).into_owned())
        .collect();
    let coordinates = segments
        .iter()
        .map(|s| {
            let mut c = s.clone();
            for (l, mut col) in c.column_iter_mut().enumerate() {
                col *= half_weight(eigenvalues[l], gamma);
            }
            c
        })
        .collect();
    let emb = HdmEmbedding {
        ids: op.ids.clone(),
        eigenvalues,
        gamma,
        segments,
        coordinates,
    };
    Ok((basis, emb))
}

/// Weighted Gram matrix of one fiber's eigenvector segments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramFeature {
    pub surface_id: String,
    pub g: DMatrix<f64>,
    pub gamma: f64,
}

/// `G_k[l, l'] = λ_l^{γ/2} λ_l'^{γ/2} <ψ_{l,k}, ψ_{l',k}>` for every fiber.
pub fn gram_features(emb: &HdmEmbedding, gamma: f64) -> Vec<GramFeature> {
    let w: Vec<f64> = emb.eigenvalues.iter().map(|&l| half_weight(l, gamma)).collect();
    emb.segments
        .iter()
        .zip(&emb.ids)
        .map(|(s, id)| {
            let raw = s.transpose() * s;
            let g = DMatrix::from_fn(raw.nrows(), raw.ncols(), |a, b| w[a] * w[b] * raw[(a, b)]);
            GramFeature {
                surface_id: id.clone(),
                g,
                gamma,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    Spectral,
}

impl std::str::FromStr for MatrixNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(Self::Frobenius),
            "spectral" => Ok(Self::Spectral),
            other => Err(Error::InvalidArgument(format!("unknown matrix norm {other:?}"))),
        }
    }
}

/// Frobenius-norm distance between two Gram features.
pub fn hbdd(a: &GramFeature, b: &GramFeature) -> Result<f64> {
    hbdd_with(a, b, MatrixNorm::Frobenius)
}

pub fn hbdd_with(a: &GramFeature, b: &GramFeature, norm: MatrixNorm) -> Result<f64> {
    if a.g.shape() != b.g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?} Gram matrices",
            a.g.shape(),
            b.g.shape()
        )));
    }
    if a.gamma != b.gamma {
        return Err(Error::InvalidArgument(format!(
            "Gram exponents differ ({} vs {})",
            a.gamma, b.gamma
        )));
    }
    let diff = &a.g - &b.g;
    match norm {
        MatrixNorm::Frobenius => Ok(frobenius_norm(&diff)),
        MatrixNorm::Spectral => spectral_norm(&diff),
    }
}

/// All pairwise HBDD values as a distance graph.
pub fn hbdd_graph(features: &[GramFeature], norm: MatrixNorm) -> Result<DistanceGraph> {
    let k = features.len();
    let mut d = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let v = hbdd_with(&features[a], &features[b], norm)?;
            d[(a, b)] = v;
            d[(b, a)] = v;
        }
    }
    DistanceGraph::new(features.iter().map(|f| f.surface_id.clone()).collect(), d)
}

/// Per-fiber cluster labels in 1..=M.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentLabels {
    pub ids: Vec<String>,
    pub labels: Vec<Vec<u32>>,
    pub clusters: usize,
    /// Clusters absent from each fiber. Reported, not required to be zero.
    pub missing: Vec<usize>,
    /// Clusters that ended up empty over the whole collection.
    pub empty_clusters: usize,
}

impl SegmentLabels {
    /// Per fiber, the number of points carrying each label 1..=M.
    pub fn histograms(&self) -> BTreeMap<String, Vec<usize>> {
        self.ids
            .iter()
            .zip(&self.labels)
            .map(|(id, ls)| {
                let mut h = vec![0; self.clusters];
                for &l in ls {
                    h[l as usize - 1] += 1;
                }
                (id.clone(), h)
            })
            .collect()
    }
}

/// k-means on the pooled embedding coordinates. Cluster numbers follow the
/// order in which clusters first appear in the pooled point order.
pub fn segment_collection(emb: &HdmEmbedding, clusters: usize, seed: u64) -> Result<SegmentLabels> {
    if clusters == 0 {
        return Err(Error::InvalidArgument("need at least one segment".into()));
    }
    let pooled = emb.pooled();
    let km = kmeans(&pooled, clusters, seed, KMEANS_RESTARTS)?;
    let mut rename = vec![None; clusters];
    let mut next = 1u32;
    let flat: Vec<u32> = km
        .labels
        .iter()
        .map(|&l| {
            *rename[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    let n = emb.fiber_len();
    let labels: Vec<Vec<u32>> = flat.chunks(n).map(|c| c.to_vec()).collect();
    let missing = labels
        .iter()
        .map(|ls| {
            let mut seen = vec![false; clusters];
            for &l in ls {
                seen[l as usize - 1] = true;
            }
            seen.iter().filter(|s| !**s).count()
        })
        .collect::<Vec<_>>();
    if missing.iter().any(|&m| m > 0) {
        log::info!("some segments are absent from some surfaces: {missing:?}");
    }
    Ok(SegmentLabels {
        ids: emb.ids.clone(),
        labels,
        clusters,
        missing,
        empty_clusters: km.empty_clusters,
    })
}

/// Nonnegative affine weights (summing to 1) over `points` minimizing the
/// distance of their combination to `y`, by exhaustive search over
/// supports. Returns None when the points are affinely dependent.
fn affine_nnls(points: &[DVector<f64>], y: &DVector<f64>) -> Option<Vec<f64>> {
    let q = points.len();
    let dim = y.len();
    if q > 1 {
        let diffs = DMatrix::from_fn(dim, q - 1, |r, c| points[c + 1][r] - points[0][r]);
        let sv = diffs.singular_values();
        let top = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-9 * top.max(f64::MIN_POSITIVE)).count();
        if rank < (q - 1).min(dim) || top == 0.0 {
            return None;
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << q) {
        let support: Vec<usize> = (0..q).filter(|b| mask & (1 << b) != 0).collect();
        let s0 = support[0];
        let mut w = vec![0.0; q];
        if support.len() == 1 {
            w[s0] = 1.0;
        } else {
            // combination = p0 + Σ v_i (p_i - p0)
            let a = DMatrix::from_fn(dim, support.len() - 1, |r, c| points[support[c + 1]][r] - points[s0][r]);
            let rhs = y - &points[s0];
            let v = a.clone().svd(true, true).solve(&rhs, 1e-12).ok()?;
            let mut w0 = 1.0;
            for (c, &i) in support[1..].iter().enumerate() {
                w[i] = v[c];
                w0 -= v[c];
            }
            w[s0] = w0;
            if w.iter().any(|&x| x < -1e-12) {
                continue;
            }
            for x in &mut w {
                *x = x.max(0.0);
            }
            let s: f64 = w.iter().sum();
            for x in &mut w {
                *x /= s;
            }
        }
        let mut comb = DVector::zeros(dim);
        for (p, &x) in points.iter().zip(&w) {
            comb.axpy(x, p, 1.0);
        }
        let r = (comb - y).norm_squared();
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, w));
        }
    }
    best.map(|(_, w)| w)
}

/// Result of one refinement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub maps: BundleMaps,
    /// Source points whose neighbors were affinely dependent and fell back
    /// to the nearest neighbor.
    pub degenerate: usize,
}

/// One refinement pass over every ordered pair of fibers: each source
/// point's embedding is reconstructed from its `q` nearest target
/// embeddings with nonnegative affine weights, and the same weights
/// combine the target surface points.
pub fn refine_correspondences(emb: &HdmEmbedding, samples: &[SampleSet], q: usize) -> Result<Refinement> {
    let k = emb.fiber_count();
    let n = emb.fiber_len();
    if samples.len() != k {
        return Err(Error::LengthMismatch(k, samples.len()));
    }
    if fiber_len(samples)? != n {
        return Err(Error::LengthMismatch(n, samples[0].len()));
    }
    if q == 0 || q > MAX_REFINE_NEIGHBORS || q > n {
        return Err(Error::InvalidArgument(format!(
            "refinement neighbor count {q} outside 1..={}",
            MAX_REFINE_NEIGHBORS.min(n)
        )));
    }
    let rows: Vec<Vec<DVector<f64>>> = emb
        .coordinates
        .iter()
        .map(|c| c.row_iter().map(|r| r.transpose()).collect())
        .collect();
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let results: Vec<(SoftMap, usize)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut degenerate = 0;
            let weights = (0..n)
                .map(|i| {
                    let y = &rows[a][i];
                    let mut order: Vec<(f64, usize)> = rows[b]
                        .iter()
                        .enumerate()
                        .map(|(j, z)| ((z - y).norm_squared(), j))
                        .collect();
                    order.sort_by(|x, z| x.0.total_cmp(&z.0).then(x.1.cmp(&z.1)));
                    let near: Vec<usize> = order[..q].iter().map(|&(_, j)| j).collect();
                    let pts: Vec<DVector<f64>> = near.iter().map(|&j| rows[b][j].clone()).collect();
                    match affine_nnls(&pts, y) {
                        Some(w) => near
                            .iter()
                            .zip(w)
                            .filter(|(_, w)| *w > 0.0)
                            .map(|(&j, w)| (j, w))
                            .collect(),
                        None => {
                            degenerate += 1;
                            vec![(near[0], 1.0)]
                        }
                    }
                })
                .collect();
            let m = SoftMap {
                from_id: samples[a].mesh_id.clone(),
                to_id: samples[b].mesh_id.clone(),
                weights,
            };
            (m, degenerate)
        })
        .collect();
    let mut maps = BTreeMap::new();
    let mut degenerate = 0;
    for (&key, (m, d)) in pairs.iter().zip(results) {
        degenerate += d;
        maps.insert(key, m);
    }
    if degenerate > 0 {
        log::warn!("{degenerate} refinement neighborhoods were affinely dependent");
    }
    Ok(Refinement {
        maps: BundleMaps { maps },
        degenerate,
    })
}

/// Mean distance between a map's images and the true partners on the
/// target fiber.
pub fn correspondence_error(map: &SoftMap, target: &[Point3<f64>], truth: &CorrespondenceMap) -> Result<f64> {
    if map.len() != truth.len() {
        return Err(Error::LengthMismatch(map.len(), truth.len()));
    }
    if map.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = (0..map.len())
        .map(|i| (map.image(i, target) - target[truth.assignment[i]]).norm())
        .sum();
    Ok(total / map.len() as f64)
}

/// Mean correspondence error over every ordered pair of fibers.
pub fn mean_correspondence_error(
    maps: &BundleMaps,
    samples: &[SampleSet],
    truth: impl Fn(usize, usize) -> CorrespondenceMap,
) -> Result<f64> {
    let k = samples.len();
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                total += correspondence_error(maps.get(a, b)?, &samples[b].positions(), &truth(a, b))?;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub dims: usize,
    pub gamma: f64,
    pub neighbors: usize,
    pub rounds: usize,
}

impl RefineConfig {
    pub fn new(tau1: f64, tau2: f64) -> Self {
        Self {
            tau1,
            tau2,
            dims: TEMPLATE_DIMS,
            gamma: 0.0,
            neighbors: REFINE_NEIGHBORS,
            rounds: REFINE_ROUNDS,
        }
    }
}

/// Alternates bundle embedding and refinement: each round rebuilds the
/// operator from the current maps. Returns the maps after every round.
pub fn refine_rounds(
    samples: &[SampleSet],
    maps: &BundleMaps,
    g: &DistanceGraph,
    cfg: &RefineConfig,
) -> Result<Vec<Refinement>> {
    let mut current = maps.clone();
    let mut out = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let op = assemble_hdm(samples, &current, g, cfg.tau1, cfg.tau2)?;
        let (_, emb) = hdm_embed(&op, cfg.dims, cfg.gamma)?;
        let r = refine_correspondences(&emb, samples, cfg.neighbors)?;
        current = r.maps.clone();
        out.push(r);
    }
    Ok(out)
}

/// Landmarks chosen once on the template and carried to every fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLandmarks {
    /// Indices into the reference fiber (fiber 0), with their conditional
    /// variances under the fiber-averaged covariance.
    pub template: LandmarkSet,
    /// Per fiber, the landmark positions.
    pub positions: Vec<Vec<Point3<f64>>>,
    /// Per fiber, the sample index nearest to each landmark.
    pub nearest: Vec<Vec<usize>>,
    pub sigma: f64,
}

/// Half the RMS distance of a point set to its centroid.
pub fn default_landmark_bandwidth(points: &[Point3<f64>]) -> f64 {
    let n = points.len().max(1) as f64;
    let c = points.iter().fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords) / n;
    0.5 * (points.iter().map(|p| (p.coords - c).norm_squared()).sum::<f64>() / n).sqrt()
}

/// Greedy Gaussian-process landmarks on the template. Template point `m`
/// is reference point `m` of fiber 0; on fiber `k` it sits at its image
/// under `maps` (0 -> k). The covariance between template points is the
/// Gaussian kernel of their images, averaged over all fibers.
pub fn joint_gp_landmarks(
    samples: &[SampleSet],
    maps: &BundleMaps,
    count: usize,
    sigma: Option<f64>,
) -> Result<JointLandmarks> {
    let n = fiber_len(samples)?;
    let k = samples.len();
    let images: Vec<Vec<Point3<f64>>> = (0..k)
        .map(|b| {
            let target = samples[b].positions();
            if b == 0 {
                Ok(target)
            } else {
                let m = maps.get(0, b)?;
                if m.len() != n {
                    return Err(Error::LengthMismatch(n, m.len()));
                }
                Ok(m.images(&target))
            }
        })
        .collect::<Result<_>>()?;
    let sigma = sigma.unwrap_or_else(|| default_landmark_bandwidth(&images[0]));
    let mut cov = DMatrix::zeros(n, n);
    for img in &images {
        cov += gaussian_covariance(img, sigma)?;
    }
    cov /= k as f64;
    let template = gp_landmarks(&cov, count)?;
    let positions: Vec<Vec<Point3<f64>>> = images
        .iter()
        .map(|img| template.indices.iter().map(|&m| img[m]).collect())
        .collect();
    let nearest = positions
        .iter()
        .zip(samples)
        .map(|(ps, s)| {
            let pts = s.positions();
            ps.iter()
                .map(|p| {
                    (0..n)
                        .min_by(|&a, &b| (pts[a] - p).norm_squared().total_cmp(&(pts[b] - p).norm_squared()))
                        .unwrap()
                })
                .collect()
        })
        .collect();
    Ok(JointLandmarks {
        template,
        positions,
        nearest,
        sigma,
    })
}

/// Automatic bandwidths: τ1 = 2 t* with t* minimizing the semigroup error
/// averaged over the fibers' own distance matrices, τ2 = 2 t* for the
/// distance graph. Both grids are 16 log-spaced times over
/// [1e-3, 1] x the median squared distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutoBandwidths {
    pub tau1: f64,
    pub tau2: f64,
    pub fiber_curve: Vec<(f64, Option<f64>)>,
    pub base_curve: Vec<(f64, Option<f64>)>,
}

pub fn auto_bandwidths(samples: &[SampleSet], g: &DistanceGraph) -> Result<AutoBandwidths> {
    use crate::diffusion::{default_time_grid, log_grid, median_squared_distance, tune_time};
    fiber_len(samples)?;
    let dists: Vec<DMatrix<f64>> = samples
        .iter()
        .map(|s| {
            let p = s.positions();
            DMatrix::from_fn(p.len(), p.len(), |i, j| (p[i] - p[j]).norm())
        })
        .collect();
    let med = {
        let mut v: Vec<f64> = dists.iter().map(median_squared_distance).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2].max(f64::MIN_POSITIVE)
    };
    let grid = log_grid(1e-3 * med, med, 16);
    let points: Vec<(Option<f64>, bool)> = grid
        .iter()
        .map(|&t| {
            let pts: Result<Vec<(f64, f64)>> = dists.par_iter().map(|d| semigroup_point(d, t)).collect();
            match pts {
                Ok(p) => (
                    Some(p.iter().map(|x| x.0).sum::<f64>() / p.len() as f64),
                    p.iter().all(|x| x.1 >= MIN_OFF_DIAGONAL_MASS),
                ),
                Err(_) => (None, false),
            }
        })
        .collect();
    let fiber_curve: Vec<(f64, Option<f64>)> = grid.iter().zip(&points).map(|(&t, p)| (t, p.0)).collect();
    let spread: Vec<bool> = points.iter().map(|p| p.1).collect();
    let (t1, _) = pick_time(&fiber_curve, &spread)?;
    let base = tune_time(&g.d, &default_time_grid(&g.d))?;
    Ok(AutoBandwidths {
        tau1: 2.0 * t1,
        tau2: 2.0 * base.t,
        fiber_curve,
        base_curve: base.curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_diffusion_kernel;

    fn random_points(n: usize, seed: u64) -> Vec<Point3<f64>> {
        use rand::SeedableRng;
        crate::registration::tests::random_points(n, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn cloud(id: &str, pts: &[Point3<f64>]) -> SampleSet {
        SampleSet {
            mesh_id: id.into(),
            points: pts
                .iter()
                .enumerate()
                .map(|(i, p)| crate::mesh::SamplePoint {
                    vertex: i,
                    position: *p,
                    face: 0,
                    barycentric: [1.0, 0.0, 0.0],
                })
                .collect(),
            seed: 0,
        }
    }

    fn trivial_bundle(k: usize, pts: &[Point3<f64>], d: f64) -> (Vec<SampleSet>, BundleMaps, DistanceGraph) {
        let samples: Vec<SampleSet> = (0..k).map(|i| cloud(&format!("s{i}"), pts)).collect();
        let maps = BundleMaps::identity(&samples);
        let dm = DMatrix::from_fn(k, k, |a, b| if a == b { 0.0 } else { d });
        let g = DistanceGraph::new(samples.iter().map(|s| s.mesh_id.clone()).collect(), dm).unwrap();
        (samples, maps, g)
    }

    fn point_dists(p: &[Point3<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(p.len(), p.len(), |i, j| (p[i] - p[j]).norm())
    }

    #[test]
    fn single_fiber_is_diffusion_kernel_at_half_tau() {
        let pts = random_points(12, 1);
        let (s, maps, g) = trivial_bundle(1, &pts, 0.0);
        let op = assemble_hdm(&s, &maps, &g, 0.3, 1.0).unwrap();
        let dk = build_diffusion_kernel(&point_dists(&pts), 0.15).unwrap();
        assert!((op.w() - &dk.h).amax() < 1e-12);
    }

    #[test]
    fn identical_fibers_give_equal_blocks() {
        let pts = random_points(10, 2);
        let (s, maps, g) = trivial_bundle(3, &pts, 0.0);
        let op = assemble_hdm(&s, &maps, &g, 0.5, 1.0).unwrap();
        let diag = op.block(0, 0);
        for a in 0..3 {
            for b in 0..3 {
                assert!((op.block(a, b) - &diag).amax() < 1e-15);
            }
        }
    }

    /// Scalar oracle for one entry of the unnormalized kernel.
    fn oracle_entry(
        x: &[Vec<Point3<f64>>],
        p: &BTreeMap<(usize, usize), Vec<usize>>,
        d: &DMatrix<f64>,
        (l, j): (usize, usize),
        (k, i): (usize, usize),
        tau1: f64,
        tau2: f64,
    ) -> f64 {
        let map = |a: usize, b: usize, idx: usize| if a == b { idx } else { p[&(a, b)][idx] };
        let pj = x[k][map(l, k, j)];
        let pi = x[l][map(k, l, i)];
        let mut num = 0.0;
        for c in 0..3 {
            num += (pj[c] - x[k][i][c]).powi(2);
            num += (x[l][j][c] - pi[c]).powi(2);
        }
        (-num / (4.0 * tau1)).exp() * (-d[(l, k)] * d[(l, k)] / (2.0 * tau2)).exp()
    }

    #[test]
    fn two_fiber_entries_match_scalar_oracle() {
        let x = vec![
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.5),
            ],
            vec![
                Point3::new(0.1, 0.2, 0.0),
                Point3::new(0.9, -0.1, 0.3),
                Point3::new(0.2, 0.8, 0.4),
            ],
        ];
        let samples = vec![cloud("a", &x[0]), cloud("b", &x[1])];
        let fwd = CorrespondenceMap::new("a", "b", vec![2, 0, 1]).unwrap();
        let mut hard = BTreeMap::new();
        hard.insert((0, 1), fwd.clone());
        let maps = BundleMaps::from_hard(&hard);
        let mut p = BTreeMap::new();
        p.insert((0, 1), vec![2, 0, 1]);
        p.insert((1, 0), vec![1, 2, 0]);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.7, 0.0]);
        let g = DistanceGraph::new(vec!["a".into(), "b".into()], d.clone()).unwrap();
        let (tau1, tau2) = (0.35, 0.6);
        let op = assemble_hdm(&samples, &maps, &g, tau1, tau2).unwrap();
        for l in 0..2 {
            for j in 0..3 {
                let row: Vec<f64> = (0..2)
                    .flat_map(|k| (0..3).map(move |i| (k, i)))
                    .map(|ki| oracle_entry(&x, &p, &d, (l, j), ki, tau1, tau2))
                    .collect();
                let sum: f64 = row.iter().sum();
                for (c, v) in row.iter().enumerate() {
                    assert!((op.w()[(l * 3 + j, c)] - v / sum).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_missing_maps_error() {
        let pts = random_points(8, 3);
        let (s, mut maps, g) = trivial_bundle(3, &pts, 0.4);
        let op = assemble_hdm(&s, &maps, &g, 0.2, 0.5).unwrap();
        for r in op.w().row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-10);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
        maps.maps.remove(&(2, 1));
        assert!(matches!(
            assemble_hdm(&s, &maps, &g, 0.2, 0.5),
            Err(Error::MissingMap(2, 1))
        ));
        assert!(matches!(
            assemble_hdm(&s, &maps, &g, 0.0, 0.5),
            Err(Error::InvalidBandwidth(_))
        ));
    }

    #[test]
    fn larger_tau2_moves_mass_across_fibers() {
        let a = random_points(9, 4);
        let b: Vec<Point3<f64>> = a
            .iter()
            .map(|p| p + nalgebra::Vector3::new(0.05, -0.02, 0.03))
            .collect();
        let samples = vec![cloud("a", &a), cloud("b", &b)];
        let maps = BundleMaps::identity(&samples);
        let g = DistanceGraph::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]),
        )
        .unwrap();
        let mass: Vec<f64> = [0.05, 0.2, 1.0]
            .iter()
            .map(|&t2| assemble_hdm(&samples, &maps, &g, 0.3, t2).unwrap().off_diagonal_mass())
            .collect();
        assert!(mass[0] < mass[1] && mass[1] < mass[2], "{mass:?}");
    }

    #[test]
    fn trivial_bundle_factorizes() {
        let pts = random_points(7, 5);
        let k = 4;
        let d = 0.3;
        let (tau1, tau2) = (0.4, 0.25);
        let (s, maps, g) = trivial_bundle(k, &pts, d);
        let op = assemble_hdm(&s, &maps, &g, tau1, tau2).unwrap();
        let base = DMatrix::from_fn(k, k, |a, b| (-g.d[(a, b)].powi(2) / (2.0 * tau2)).exp());
        let fiber = DMatrix::from_fn(7, 7, |i, j| {
            (-2.0 * (pts[i] - pts[j]).norm_squared() / (4.0 * tau1)).exp()
        });
        let mut tensor = base.kronecker(&fiber);
        for (i, mut row) in tensor.row_iter_mut().enumerate() {
            let _ = i;
            let s = row.sum();
            row /= s;
        }
        assert!((op.w() - tensor).amax() < 1e-10);
    }

    #[test]
    fn trivial_bundle_embeddings_and_segments_coincide() {
        let pts = random_points(30, 6);
        let (s, maps, g) = trivial_bundle(4, &pts, 0.1);
        let op = assemble_hdm(&s, &maps, &g, 0.2, 1.0).unwrap();
        let (basis, emb) = hdm_embed(&op, 3, 1.0).unwrap();
        assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(basis.eigenvalues[1] <= 1.0 + 1e-12);
        for k in 1..4 {
            assert!((&emb.coordinates[k] - &emb.coordinates[0]).amax() < 1e-6);
        }
        let seg = segment_collection(&emb, 3, 7).unwrap();
        for k in 1..4 {
            assert_eq!(seg.labels[k], seg.labels[0]);
        }
        let feats = gram_features(&emb, 1.0);
        for f in &feats[1..] {
            assert!((&f.g - &feats[0].g).amax() < 1e-8);
        }
    }

    #[test]
    fn embedding_segments_reassemble_eigenvectors() {
        let pts = random_points(10, 7);
        let other: Vec<Point3<f64>> = random_points(10, 8);
        let samples = vec![cloud("a", &pts), cloud("b", &other)];
        let maps = BundleMaps::identity(&samples);
        let g = DistanceGraph::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 0.0]),
        )
        .unwrap();
        let op = assemble_hdm(&samples, &maps, &g, 0.5, 0.5).unwrap();
        let (basis, emb) = hdm_embed(&op, 4, 2.0).unwrap();
        for l in 0..4 {
            for k in 0..2 {
                for i in 0..10 {
                    assert_eq!(emb.segments[k][(i, l)], basis.vectors[(k * 10 + i, l + 1)]);
                    let scaled = basis.eigenvalues[l + 1].max(0.0) * emb.segments[k][(i, l)];
                    assert!((emb.coordinates[k][(i, l)] - scaled).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gram_matches_direct_summation() {
        let seg = vec![
            DMatrix::from_row_slice(3, 2, &[0.3, -0.1, 0.2, 0.4, -0.5, 0.6]),
            DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.7, 0.2, -0.2]),
        ];
        let lam = vec![0.8, 0.3];
        let emb = HdmEmbedding {
            ids: vec!["a".into(), "b".into()],
            eigenvalues: lam.clone(),
            gamma: 0.0,
            coordinates: seg.clone(),
            segments: seg.clone(),
        };
        for gamma in [0.0, 1.0, 2.0] {
            let feats = gram_features(&emb, gamma);
            for (k, f) in feats.iter().enumerate() {
                for a in 0..2 {
                    for b in 0..2 {
                        let mut s = 0.0;
                        for m in 0..3 {
                            s += seg[k][(m, a)] * seg[k][(m, b)];
                        }
                        let w = (lam[a] as f64).powf(gamma / 2.0) * (lam[b] as f64).powf(gamma / 2.0);
                        assert!((f.g[(a, b)] - w * s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn hbdd_arithmetic() {
        let a = GramFeature {
            surface_id: "a".into(),
            g: DMatrix::identity(2, 2),
            gamma: 1.0,
        };
        let b = GramFeature {
            surface_id: "b".into(),
            g: DMatrix::zeros(2, 2),
            gamma: 1.0,
        };
        assert!((hbdd(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(hbdd(&a, &a).unwrap(), 0.0);
        assert_eq!(hbdd_with(&a, &b, MatrixNorm::Spectral).unwrap(), 1.0);
        let c = GramFeature {
            surface_id: "c".into(),
            g: DMatrix::zeros(3, 3),
            gamma: 1.0,
        };
        assert!(matches!(hbdd(&a, &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn hbdd_is_a_metric_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let f: Vec<GramFeature> = (0..3)
                .map(|i| {
                    let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
                    GramFeature {
                        surface_id: i.to_string(),
                        g: &m * m.transpose(),
                        gamma: 2.0,
                    }
                })
                .collect();
            let d = |a: usize, b: usize| hbdd(&f[a], &f[b]).unwrap();
            assert_eq!(d(0, 1), d(1, 0));
            assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        }
    }

    #[test]
    fn single_segment_labels_everything_one() {
        let pts = random_points(12, 10);
        let (s, maps, g) = trivial_bundle(2, &pts, 0.2);
        let op = assemble_hdm(&s, &maps, &g, 0.3, 0.5).unwrap();
        let (_, emb) = hdm_embed(&op, 3, 1.0).unwrap();
        let seg = segment_collection(&emb, 1, 0).unwrap();
        assert!(seg.labels.iter().flatten().all(|&l| l == 1));
        assert_eq!(seg.histograms()["s0"], vec![12]);
    }

    #[test]
    fn affine_weights_reconstruct_interior_points() {
        let pts: Vec<DVector<f64>> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            .iter()
            .map(|p| DVector::from_row_slice(p))
            .collect();
        let y = DVector::from_row_slice(&[0.2, 0.3, 0.1]);
        let w = affine_nnls(&pts, &y).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12);
        // outside the simplex: projection onto the nearest face
        let w = affine_nnls(&pts, &DVector::from_row_slice(&[1.0, 1.0, -0.5])).unwrap();
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!(((w[1] - 0.5).abs() < 1e-12) && ((w[2] - 0.5).abs() < 1e-12));
        let flat: Vec<DVector<f64>> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]
            .iter()
            .map(|p| DVector::from_row_slice(p))
            .collect();
        assert!(affine_nnls(&flat, &y).is_none());
    }

    #[test]
    fn ground_truth_maps_are_a_fixed_point() {
        let pts = random_points(40, 11);
        let (s, maps, g) = trivial_bundle(3, &pts, 0.2);
        let op = assemble_hdm(&s, &maps, &g, 0.3, 2.0).unwrap();
        let (_, emb) = hdm_embed(&op, 3, 1.0).unwrap();
        let r = refine_correspondences(&emb, &s, 4).unwrap();
        let truth = |a: usize, b: usize| CorrespondenceMap::identity(&s[a].mesh_id, &s[b].mesh_id, 40);
        assert!(mean_correspondence_error(&r.maps, &s, truth).unwrap() < 1e-8);
        for m in r.maps.maps.values() {
            let img = m.images(&pts);
            for (i, p) in img.iter().enumerate() {
                assert!((p - pts[i]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn one_neighbor_snaps_to_nearest_embedding() {
        let pts = random_points(20, 12);
        let other = random_points(20, 13);
        let samples = vec![cloud("a", &pts), cloud("b", &other)];
        let maps = BundleMaps::identity(&samples);
        let g = DistanceGraph::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 0.0]),
        )
        .unwrap();
        let op = assemble_hdm(&samples, &maps, &g, 0.5, 1.0).unwrap();
        let (_, emb) = hdm_embed(&op, 3, 1.0).unwrap();
        let r = refine_correspondences(&emb, &samples, 1).unwrap();
        let m = r.maps.get(0, 1).unwrap();
        for i in 0..20 {
            let y = emb.coordinates[0].row(i);
            let nn = (0..20)
                .min_by(|&a, &b| {
                    (emb.coordinates[1].row(a) - y)
                        .norm()
                        .total_cmp(&(emb.coordinates[1].row(b) - y).norm())
                })
                .unwrap();
            assert_eq!(m.weights[i], vec![(nn, 1.0)]);
        }
    }

    #[test]
    fn joint_landmarks_on_identical_fibers_match_single_surface() {
        let pts = random_points(30, 14);
        let (s, maps, _) = trivial_bundle(4, &pts, 0.0);
        let joint = joint_gp_landmarks(&s, &maps, 6, None).unwrap();
        let sigma = default_landmark_bandwidth(&pts);
        let single = gp_landmarks(&gaussian_covariance(&pts, sigma).unwrap(), 6).unwrap();
        assert_eq!(joint.template.indices, single.indices);
        for k in 0..4 {
            assert_eq!(joint.nearest[k], single.indices);
        }
    }

    #[test]
    fn joint_landmarks_match_brute_force_on_pooled_covariance() {
        use crate::landmarking::tests::brute_force_greedy;
        let fibers: Vec<Vec<Point3<f64>>> = (0..5).map(|k| random_points(25, 20 + k)).collect();
        let samples: Vec<SampleSet> = fibers
            .iter()
            .enumerate()
            .map(|(k, p)| cloud(&format!("f{k}"), p))
            .collect();
        let maps = BundleMaps::identity(&samples);
        let joint = joint_gp_landmarks(&samples, &maps, 8, Some(0.4)).unwrap();
        let pooled = DMatrix::from_fn(25, 25, |i, j| {
            fibers
                .iter()
                .map(|p| (-(p[i] - p[j]).norm_squared() / (2.0 * 0.16)).exp())
                .sum::<f64>()
                / 5.0
        });
        assert_eq!(joint.template.indices, brute_force_greedy(&pooled, 8));
        let one = joint_gp_landmarks(&samples, &maps, 1, Some(0.4)).unwrap();
        let top = (0..25)
            .max_by(|&a, &b| pooled[(a, a)].total_cmp(&pooled[(b, b)]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(one.template.indices, vec![top]);
    }
}
