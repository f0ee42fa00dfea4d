//! Rigid registration, correspondence maps and shape distances.

mod assignment;
mod cp;
mod mst;

pub use assignment::{assignment_cost, solve_assignment};
pub use cp::{discrete_cp, discrete_cp_restarts, pairwise_cp, CpResult, PairwiseCp};
pub use mst::{minimum_spanning_tree, mst_propagate, EdgeAlignment, MstPropagation};

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "MotionRecord", from = "MotionRecord")]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct MotionRecord {
    /// Row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<RigidMotion> for MotionRecord {
    fn from(m: RigidMotion) -> Self {
        let r = m.rotation;
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [m.translation.x, m.translation.y, m.translation.z],
        }
    }
}

impl From<MotionRecord> for RigidMotion {
    fn from(r: MotionRecord) -> Self {
        Self {
            rotation: Matrix3::from_row_slice(&r.rotation),
            translation: Vector3::from(r.translation),
        }
    }
}

impl Default for RigidMotion {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self` after `first`: x -> self(first(x)).
    pub fn after(&self, first: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidMotion {
        let rt = self.rotation.transpose();
        RigidMotion {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_mesh(&self, m: &TriMesh) -> TriMesh {
        m.map_positions(|p| self.apply(p))
    }
}

/// Bijection between the samples of two surfaces: sample `i` of the source
/// goes to sample `assignment[i]` of the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub from_id: String,
    pub to_id: String,
    pub assignment: Vec<usize>,
}

impl CorrespondenceMap {
    pub fn new(from_id: &str, to_id: &str, assignment: Vec<usize>) -> Result<Self> {
        let n = assignment.len();
        let mut seen = vec![false; n];
        for &j in &assignment {
            if j >= n || seen[j] {
                return Err(Error::InvalidArgument(format!(
                    "assignment {from_id} -> {to_id} is not a permutation"
                )));
            }
            seen[j] = true;
        }
        Ok(Self {
            from_id: from_id.to_string(),
            to_id: to_id.to_string(),
            assignment,
        })
    }

    pub fn identity(from_id: &str, to_id: &str, n: usize) -> Self {
        Self {
            from_id: from_id.to_string(),
            to_id: to_id.to_string(),
            assignment: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.assignment.iter().enumerate() {
            inv[j] = i;
        }
        Self {
            from_id: self.to_id.clone(),
            to_id: self.from_id.clone(),
            assignment: inv,
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &CorrespondenceMap) -> Result<Self> {
        if self.len() != next.len() {
            return Err(Error::LengthMismatch(self.len(), next.len()));
        }
        Ok(Self {
            from_id: self.from_id.clone(),
            to_id: next.to_id.clone(),
            assignment: self.assignment.iter().map(|&j| next.assignment[j]).collect(),
        })
    }
}

/// Symmetric matrix of pairwise shape distances between named specimens.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGraph {
    pub ids: Vec<String>,
    pub d: nalgebra::DMatrix<f64>,
}

impl DistanceGraph {
    pub fn new(ids: Vec<String>, d: nalgebra::DMatrix<f64>) -> Result<Self> {
        let k = ids.len();
        if d.nrows() != k || d.ncols() != k {
            return Err(Error::ShapeMismatch(format!(
                "{} ids but a {}x{} distance matrix",
                k,
                d.nrows(),
                d.ncols()
            )));
        }
        for i in 0..k {
            if d[(i, i)].abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("nonzero diagonal at {i}")));
            }
            for j in 0..k {
                let x = d[(i, j)];
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::InvalidArgument(format!("bad distance {x} at ({i}, {j})")));
                }
                if (x - d[(j, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { ids, d })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of ordered triples (i, j, k) of distinct indices with
    /// d(i,k) > d(i,j) + d(j,k) beyond rounding.
    pub fn triangle_violations(&self) -> usize {
        let k = self.len();
        let mut count = 0;
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    if i != j && j != l && i != l {
                        let slack = 1e-12 * (1.0 + self.d[(i, l)]);
                        if self.d[(i, l)] > self.d[(i, j)] + self.d[(j, l)] + slack {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    }
}

/// Two equally long, ordered lists of corresponding points.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPairs {
    pub source: Vec<Point3<f64>>,
    pub target: Vec<Point3<f64>>,
}

impl LandmarkPairs {
    pub fn new(source: Vec<Point3<f64>>, target: Vec<Point3<f64>>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::LengthMismatch(source.len(), target.len()));
        }
        Ok(Self { source, target })
    }

    pub fn swapped(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschFit {
    pub motion: RigidMotion,
    /// Root mean squared distance at the optimum.
    pub residual: f64,
    /// The source points are (nearly) collinear or coincident, so the
    /// returned rotation is one of several minimizers.
    pub degenerate: bool,
}

fn mean_point(points: &[Point3<f64>]) -> Vector3<f64> {
    points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares proper rigid motion taking `source` onto `target`.
pub fn kabsch(pairs: &LandmarkPairs) -> Result<KabschFit> {
    let n = pairs.source.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    let cs = mean_point(&pairs.source);
    let ct = mean_point(&pairs.target);
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, t) in pairs.source.iter().zip(&pairs.target) {
        let a = s.coords - cs;
        h += a * (t.coords - ct).transpose();
        spread += a * a.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    // flip the axis of the smallest singular value if a reflection results
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = ct - rotation * cs;
    let motion = RigidMotion { rotation, translation };

    let msd = pairs
        .source
        .iter()
        .zip(&pairs.target)
        .map(|(s, t)| (motion.apply(s) - t).norm_squared())
        .sum::<f64>()
        / n as f64;

    let mut ev = spread.symmetric_eigenvalues().iter().copied().collect::<Vec<_>>();
    ev.sort_by(|a, b| b.total_cmp(a));
    let degenerate = !(ev[1] > 1e-12 * ev[0].max(f64::MIN_POSITIVE)) || ev[0] <= 0.0;
    Ok(KabschFit {
        motion,
        residual: msd.max(0.0).sqrt(),
        degenerate,
    })
}

/// Landmark Procrustes distance: RMS residual after the best rigid fit.
pub fn procrustes_distance(pairs: &LandmarkPairs) -> Result<f64> {
    Ok(kabsch(pairs)?.residual)
}

/// Mean squared distance between true and propagated landmark positions.
pub fn landmark_transfer_mse(truth: &[Point3<f64>], propagated: &[Point3<f64>]) -> Result<f64> {
    if truth.len() != propagated.len() {
        return Err(Error::LengthMismatch(truth.len(), propagated.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = truth.iter().zip(propagated).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(total / truth.len() as f64)
}

/// Weighted mean and principal axes (columns, descending variance, right
/// handed) of a point set.
fn principal_frame(points: &[Point3<f64>], weights: &[f64]) -> (Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
    let total: f64 = weights.iter().sum();
    let mean = points
        .iter()
        .zip(weights)
        .map(|(p, w)| p.coords * *w)
        .sum::<Vector3<f64>>()
        / total;
    let mut cov = Matrix3::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = p.coords - mean;
        cov += d * d.transpose() * *w;
    }
    cov /= total;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if axes.determinant() < 0.0 {
        axes.column_mut(2).neg_mut();
    }
    let values = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    (mean, axes, values)
}

fn has_repeated_axis(values: &Vector3<f64>) -> bool {
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    (values[0] - values[1]).abs() <= 1e-9 * scale || (values[1] - values[2]).abs() <= 1e-9 * scale
}

/// The four proper rigid motions that carry the principal frame of `a` onto
/// that of `b`, and whether either frame is ambiguous.
pub fn pca_candidates(a: &[Point3<f64>], wa: &[f64], b: &[Point3<f64>], wb: &[f64]) -> (Vec<RigidMotion>, bool) {
    let (ma, ea, va) = principal_frame(a, wa);
    let (mb, eb, vb) = principal_frame(b, wb);
    let signs = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let motions = signs
        .iter()
        .map(|s| {
            let rotation = eb * Matrix3::from_diagonal(&Vector3::from(*s)) * ea.transpose();
            RigidMotion {
                rotation,
                translation: mb - rotation * ma,
            }
        })
        .collect();
    (motions, has_repeated_axis(&va) || has_repeated_axis(&vb))
}

/// The four principal-axis candidates followed by the twenty rotations that
/// match the axes in a different order. Sample PCA of small or nearly
/// isotropic sets orders the axes unreliably.
pub fn axis_permuted_candidates(a: &[Point3<f64>], wa: &[f64], b: &[Point3<f64>], wb: &[f64]) -> Vec<RigidMotion> {
    let (ma, ea, _) = principal_frame(a, wa);
    let (mb, eb, _) = principal_frame(b, wb);
    let (mut out, _) = pca_candidates(a, wa, b, wb);
    let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for perm in perms {
        for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
            let mut m = Matrix3::zeros();
            for (col, &row) in perm.iter().enumerate() {
                m[(row, col)] = signs[col];
            }
            if m.determinant() < 0.0 {
                m = -m;
            }
            let rotation = eb * m * ea.transpose();
            out.push(RigidMotion {
                rotation,
                translation: mb - rotation * ma,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaAlignment {
    pub motion: RigidMotion,
    pub score: f64,
    /// Every candidate with its score, in enumeration order.
    pub candidates: Vec<(RigidMotion, f64)>,
    /// Two principal variances coincide, so the axis match is not unique.
    pub ambiguous: bool,
}

const SCORE_POINTS: usize = 600;

/// Symmetric nearest-neighbour RMS between point sets, each side queried on
/// an evenly strided subset of at most `SCORE_POINTS` points.
pub fn nearest_neighbor_rms(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    fn one_way(from: &[Point3<f64>], to: &[Point3<f64>]) -> f64 {
        let stride = from.len().div_ceil(SCORE_POINTS).max(1);
        let mut total = 0.0;
        let mut count = 0;
        for p in from.iter().step_by(stride) {
            let best = to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            total += best;
            count += 1;
        }
        total / count as f64
    }
    ((one_way(a, b) + one_way(b, a)) / 2.0).sqrt()
}

/// Aligns mesh `a` to mesh `b` by matching area-weighted principal axes,
/// keeping the sign choice with the best nearest-neighbour score. Ties keep
/// the earlier candidate.
pub fn pca_align(a: &TriMesh, b: &TriMesh) -> Result<PcaAlignment> {
    if a.face_count() == 0 || b.face_count() == 0 {
        return Err(Error::EmptyMesh);
    }
    let (wa, wb) = (a.vertex_areas(), b.vertex_areas());
    let (motions, ambiguous) = pca_candidates(a.vertices(), &wa, b.vertices(), &wb);
    let total_var = |pts: &[Point3<f64>]| {
        let m = mean_point(pts);
        pts.iter().map(|p| (p.coords - m).norm_squared()).sum::<f64>()
    };
    if !(total_var(a.vertices()) > 0.0) || !(total_var(b.vertices()) > 0.0) {
        return Err(Error::DegenerateCovariance);
    }
    let candidates: Vec<(RigidMotion, f64)> = motions
        .into_iter()
        .map(|m| {
            let moved: Vec<Point3<f64>> = a.vertices().iter().map(|p| m.apply(p)).collect();
            (m, nearest_neighbor_rms(&moved, b.vertices()))
        })
        .collect();
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.1 < candidates[best].1 - 1e-12 {
            best = i;
        }
    }
    if ambiguous {
        log::warn!("principal axes of {} / {} are not unique", a.id(), b.id());
    }
    Ok(PcaAlignment {
        motion: candidates[best].0,
        score: candidates[best].1,
        candidates,
        ambiguous,
    })
}
