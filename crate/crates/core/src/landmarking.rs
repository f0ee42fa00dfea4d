//! Automatic landmarks: heat-kernel covariance on a mesh, greedy
//! Gaussian-process selection of maximum conditional variance, and a sparse
//! matching-pursuit functional over a bundle Laplacian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{bottom_eigenpairs, dense_eigen};
use crate::mesh::validate::vertex_components;
use crate::mesh::TriMesh;

/// Default number of Laplacian eigenpairs kept in the heat kernel.
pub const DEFAULT_SPECTRAL_COUNT: usize = 100;
/// A conditional variance at or below this ends greedy selection.
pub const SINGULAR_VARIANCE: f64 = 1e-12;
/// Relative slack under which two variances count as tied.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Cotangent stiffness matrix (positive semidefinite, rows sum to zero) and
/// lumped vertex areas.
pub fn cotangent_laplacian(m: &TriMesh) -> (DMatrix<f64>, Vec<f64>) {
    let n = m.vertex_count();
    let mut l = DMatrix::zeros(n, n);
    for (f, face) in m.faces().iter().enumerate() {
        let double_area = m.face_cross(f).norm();
        if double_area == 0.0 {
            continue;
        }
        for k in 0..3 {
            let (a, i, j) = (face[k], face[(k + 1) % 3], face[(k + 2) % 3]);
            let p = m.vertices()[a];
            let cot = (m.vertices()[i] - p).dot(&(m.vertices()[j] - p)) / double_area;
            let w = 0.5 * cot;
            l[(i, j)] -= w;
            l[(j, i)] -= w;
            l[(i, i)] += w;
            l[(j, j)] += w;
        }
    }
    (l, m.vertex_areas())
}

/// Heat-kernel covariance `C = Σ exp(-μ t) φ φᵀ` over mesh vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOperator {
    pub c: DMatrix<f64>,
    pub t: f64,
    pub spectral_count: usize,
}

impl CovarianceOperator {
    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }

    pub fn trace(&self) -> f64 {
        self.c.trace()
    }
}

/// Lowest eigenpairs of `L φ = μ M φ`, with φ M-orthonormal.
#[derive(Debug, Clone)]
pub struct HeatSpectrum {
    pub values: Vec<f64>,
    /// One eigenfunction per column.
    pub functions: DMatrix<f64>,
}

impl HeatSpectrum {
    pub fn new(l: &DMatrix<f64>, mass: &[f64], spectral_count: usize) -> Result<Self> {
        let n = l.nrows();
        if l.ncols() != n || mass.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} stiffness, {} masses",
                n,
                l.ncols(),
                mass.len()
            )));
        }
        if let Some(i) = mass.iter().position(|m| !(*m > 0.0)) {
            return Err(Error::IsolatedVertex(i));
        }
        let inv_sqrt: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
        let mut a = DMatrix::from_fn(n, n, |i, j| l[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        let at = a.transpose();
        a = (a + at) * 0.5;
        let pairs = bottom_eigenpairs(&a, spectral_count.clamp(1, n))?;
        let functions = DMatrix::from_fn(n, pairs.values.len(), |i, c| pairs.vectors[(i, c)] * inv_sqrt[i]);
        Ok(Self {
            values: pairs.values,
            functions,
        })
    }

    pub fn covariance(&self, t: f64) -> Result<CovarianceOperator> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidBandwidth(t));
        }
        let n = self.functions.nrows();
        let mut c = DMatrix::zeros(n, n);
        for (idx, &mu) in self.values.iter().enumerate() {
            let phi = self.functions.column(idx);
            c.ger((-mu.max(0.0) * t).exp(), &phi, &phi, 1.0);
        }
        let ct = c.transpose();
        Ok(CovarianceOperator {
            c: (c + ct) * 0.5,
            t,
            spectral_count: self.values.len(),
        })
    }

    /// Smallest nonzero eigenvalue, the slowest decay rate.
    pub fn fundamental(&self) -> Option<f64> {
        self.values
            .iter()
            .copied()
            .find(|&mu| mu > 1e-9 * self.values.last().copied().unwrap_or(1.0).abs())
    }
}

/// Heat kernel of a stiffness matrix `l` with diagonal mass `mass`, from the
/// lowest `spectral_count` eigenpairs of `L φ = μ M φ` (φ M-orthonormal).
pub fn heat_kernel_from_laplacian(
    l: &DMatrix<f64>,
    mass: &[f64],
    t: f64,
    spectral_count: usize,
) -> Result<CovarianceOperator> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidBandwidth(t));
    }
    HeatSpectrum::new(l, mass, spectral_count)?.covariance(t)
}

pub fn heat_kernel_covariance(m: &TriMesh, t: f64, spectral_count: usize) -> Result<CovarianceOperator> {
    let (_, components) = vertex_components(m);
    if components > 1 {
        return Err(Error::DisconnectedMesh(components));
    }
    let (l, mass) = cotangent_laplacian(m);
    heat_kernel_from_laplacian(&l, &mass, t, spectral_count)
}

/// Heat time chosen on a calibration run and the landmarks it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatCalibration {
    pub t: f64,
    pub landmarks: LandmarkSet,
    /// (t, landmarks selected before conditioning became singular).
    pub counts: Vec<(f64, usize)>,
}

/// Tries heat times `factor / μ₁` for each grid factor (μ₁ the fundamental
/// eigenvalue) and keeps the time that yields the most landmarks, up to
/// `count`, before the conditioning becomes singular. Among equally good
/// times the largest, i.e. the smoothest kernel, wins.
pub fn calibrate_heat_time(
    m: &TriMesh,
    count: usize,
    factors: &[f64],
    spectral_count: usize,
) -> Result<HeatCalibration> {
    if factors.is_empty() {
        return Err(Error::InvalidArgument("empty heat time grid".into()));
    }
    let (_, components) = vertex_components(m);
    if components > 1 {
        return Err(Error::DisconnectedMesh(components));
    }
    let (l, mass) = cotangent_laplacian(m);
    let spectrum = HeatSpectrum::new(&l, &mass, spectral_count)?;
    let mu = spectrum.fundamental().ok_or(Error::DegenerateCovariance)?;
    let mut best: Option<(f64, LandmarkSet)> = None;
    let mut counts = Vec::with_capacity(factors.len());
    for &f in factors {
        let t = f / mu;
        let set = gp_landmarks(&spectrum.covariance(t)?.c, count.min(m.vertex_count()))?;
        counts.push((t, set.len()));
        if best.as_ref().is_none_or(|(_, b)| set.len() >= b.len()) {
            best = Some((t, set));
        }
    }
    let (t, landmarks) = best.expect("nonempty grid");
    Ok(HeatCalibration { t, landmarks, counts })
}

/// Default calibration grid, as multiples of the slowest decay time 1/μ₁.
pub const HEAT_TIME_FACTORS: [f64; 7] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0];

/// Greedily selected points with the conditional variance each had when
/// it was picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub indices: Vec<usize>,
    pub conditional_variances: Vec<f64>,
    /// Selection stopped early because every remaining point was already
    /// explained by the chosen ones.
    pub singular: bool,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index of the largest value; values within the tie tolerance of the
/// maximum go to the lowest index.
pub(crate) fn tie_argmax(values: impl Iterator<Item = (usize, f64)> + Clone) -> Option<(usize, f64)> {
    let max = values.clone().map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let slack = TIE_TOLERANCE * max.abs().max(f64::MIN_POSITIVE);
    values.filter(|&(_, v)| v >= max - slack).min_by_key(|&(i, _)| i)
}

/// Greedy maximum-MSPE selection by pivoted Cholesky: each step takes the
/// point whose variance conditioned on the chosen ones is largest.
pub fn gp_landmarks(cov: &DMatrix<f64>, count: usize) -> Result<LandmarkSet> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::ShapeMismatch(format!("{}x{} covariance", n, cov.ncols())));
    }
    if count > n {
        return Err(Error::TooManySamples {
            requested: count,
            available: n,
        });
    }
    let mut residual: Vec<f64> = (0..n).map(|i| cov[(i, i)]).collect();
    let mut factors: Vec<DVector<f64>> = Vec::with_capacity(count);
    let mut chosen = vec![false; n];
    let mut out = LandmarkSet {
        indices: Vec::new(),
        conditional_variances: Vec::new(),
        singular: false,
    };
    while out.indices.len() < count {
        let candidates = (0..n).filter(|&i| !chosen[i]).map(|i| (i, residual[i]));
        let Some((pick, var)) = tie_argmax(candidates) else {
            break;
        };
        if var <= SINGULAR_VARIANCE {
            log::warn!(
                "greedy landmarking stopped after {} points: singular conditioning",
                out.indices.len()
            );
            out.singular = true;
            break;
        }
        let scale = var.sqrt();
        let mut col = DVector::from_fn(n, |i, _| cov[(i, pick)]);
        for f in &factors {
            col.axpy(-f[pick], f, 1.0);
        }
        col /= scale;
        for i in 0..n {
            residual[i] -= col[i] * col[i];
        }
        chosen[pick] = true;
        factors.push(col);
        out.indices.push(pick);
        out.conditional_variances.push(var);
    }
    Ok(out)
}

/// `exp(-|x_i - x_j|² / 2σ²)` over a point set.
pub fn gaussian_covariance(points: &[nalgebra::Point3<f64>], sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidBandwidth(sigma));
    }
    let n = points.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        (-(points[i] - points[j]).norm_squared() / (2.0 * sigma * sigma)).exp()
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpConfig {
    /// ℓ1 weight.
    pub lambda: f64,
    /// Number of deflated directions to extract.
    pub count: usize,
    pub max_iters: usize,
    /// Relative objective decrease below which a direction is accepted.
    pub tolerance: f64,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            count: 4,
            max_iters: 5000,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpDirection {
    pub x: DVector<f64>,
    /// Objective after every accepted iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    /// Per fiber, within-fiber indices with |x_i| above the threshold.
    pub landmarks: Vec<Vec<usize>>,
}

/// Symmetrized bundle Laplacian `I - D^-1/2 K D^-1/2` of a row-stochastic
/// kernel with row sums `degrees` of its symmetric unnormalized form.
pub fn normalized_laplacian(kernel: &DMatrix<f64>, degrees: &[f64]) -> DMatrix<f64> {
    let n = kernel.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let s = kernel[(i, j)] / (degrees[i] * degrees[j]).sqrt();
        if i == j {
            1.0 - s
        } else {
            -s
        }
    })
}

fn mp_objective(q: &DMatrix<f64>, lambda: f64, x: &DVector<f64>) -> f64 {
    x.dot(&(q * x)) + lambda * x.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(z: &DVector<f64>, level: f64) -> DVector<f64> {
    z.map(|v| v.signum() * (v.abs() - level).max(0.0))
}

fn project_out(x: &mut DVector<f64>, found: &[DVector<f64>]) {
    for f in found {
        let c = f.dot(x);
        x.axpy(-c, f, 1.0);
    }
}

/// Sparse unit vectors minimizing `|A x|² + λ|x|₁` for a symmetric
/// Laplacian `a`, extracted one after another with earlier directions
/// projected out. Each solve runs proximal gradient steps followed by
/// renormalization, accepting only steps that lower the objective. The
/// start is the cheaper of the lowest remaining eigenvector and the best
/// single-coordinate vector. Entries above `3/√n` in magnitude become
/// landmarks of fiber `i / fiber_len`.
pub fn mp_collection_landmarks(a: &DMatrix<f64>, fiber_len: usize, cfg: &MpConfig) -> Result<Vec<MpDirection>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!("{}x{} Laplacian", n, a.ncols())));
    }
    if fiber_len == 0 || !n.is_multiple_of(fiber_len) {
        return Err(Error::ShapeMismatch(format!(
            "{n} rows do not split into fibers of {fiber_len}"
        )));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sparsity weight {} must be nonnegative",
            cfg.lambda
        )));
    }
    if cfg.count > n {
        return Err(Error::InvalidArgument(format!(
            "{} directions from {n} coordinates",
            cfg.count
        )));
    }
    let q = a.transpose() * a;
    let lipschitz = 2.0 * crate::linalg::spectral_norm(&q)?.max(f64::MIN_POSITIVE);
    let threshold = 3.0 / (n as f64).sqrt();
    let eig = if n <= crate::linalg::DENSE_LIMIT {
        Some(dense_eigen(&q))
    } else {
        None
    };
    let mut found: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..cfg.count {
        let mut start = lowest_remaining(&q, eig.as_ref(), &found)?;
        let mut best_atom: Option<(f64, DVector<f64>)> = None;
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            project_out(&mut e, &found);
            let norm = e.norm();
            if norm < 1e-8 {
                continue;
            }
            e /= norm;
            let f = mp_objective(&q, cfg.lambda, &e);
            if best_atom.as_ref().is_none_or(|(b, _)| f < *b) {
                best_atom = Some((f, e));
            }
        }
        if let Some((f, e)) = best_atom {
            if f < mp_objective(&q, cfg.lambda, &start) {
                start = e;
            }
        }
        let dir = prox_sphere(&q, cfg, lipschitz, start, &found);
        let x = dir.0;
        let mut landmarks = vec![Vec::new(); n / fiber_len];
        for (i, v) in x.iter().enumerate() {
            if v.abs() > threshold {
                landmarks[i / fiber_len].push(i % fiber_len);
            }
        }
        if !dir.2 {
            log::warn!("matching pursuit direction {} hit the iteration cap", out.len());
        }
        found.push(x.clone());
        out.push(MpDirection {
            x,
            objective_trace: dir.1,
            converged: dir.2,
            landmarks,
        });
    }
    Ok(out)
}

fn lowest_remaining(
    q: &DMatrix<f64>,
    eig: Option<&crate::linalg::EigenPairs>,
    found: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let n = q.nrows();
    let candidates = match eig {
        Some(e) => e.vectors.columns(n - found.len() - 1, found.len() + 1).into_owned(),
        None => bottom_eigenpairs(q, found.len() + 1)?.vectors,
    };
    // the remaining direction with the lowest Rayleigh quotient
    let mut best: Option<(f64, DVector<f64>)> = None;
    for c in candidates.column_iter() {
        let mut v = c.into_owned();
        project_out(&mut v, found);
        let norm = v.norm();
        if norm < 1e-6 {
            continue;
        }
        v /= norm;
        let r = v.dot(&(q * &v));
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, v));
        }
    }
    best.map(|(_, mut v)| {
        if v[v.iamax()] < 0.0 {
            v.neg_mut();
        }
        v
    })
    .ok_or_else(|| Error::ConvergenceFailure("no direction left after deflation".into()))
}

fn prox_sphere(
    q: &DMatrix<f64>,
    cfg: &MpConfig,
    lipschitz: f64,
    mut x: DVector<f64>,
    found: &[DVector<f64>],
) -> (DVector<f64>, Vec<f64>, bool) {
    let mut f = mp_objective(q, cfg.lambda, &x);
    let mut trace = vec![f];
    let mut step = 1.0 / lipschitz;
    let min_step = step * 1e-12;
    for _ in 0..cfg.max_iters {
        let grad = 2.0 * (q * &x);
        let mut accepted = None;
        let mut s = step;
        while s >= min_step {
            let mut y = soft_threshold(&(&x - s * &grad), s * cfg.lambda);
            project_out(&mut y, found);
            let norm = y.norm();
            if norm < 1e-300 {
                // everything thresholded away: keep the dominant coordinate
                let (i, _) = (&x - s * &grad).iamax_full();
                y = DVector::zeros(x.len());
                y[i] = (x[i] - s * grad[i]).signum();
                project_out(&mut y, found);
                let nn = y.norm();
                if nn < 1e-12 {
                    s *= 0.5;
                    continue;
                }
                y /= nn;
            } else {
                y /= norm;
            }
            let fy = mp_objective(q, cfg.lambda, &y);
            if fy < f {
                accepted = Some((y, fy));
                break;
            }
            s *= 0.5;
        }
        let Some((y, fy)) = accepted else {
            return (x, trace, true);
        };
        let decrease = f - fy;
        x = y;
        f = fy;
        trace.push(f);
        step = (2.0 * s).min(1.0 / lipschitz * 4.0);
        if decrease <= cfg.tolerance * f.abs().max(1e-300) {
            return (x, trace, true);
        }
    }
    (x, trace, false)
}
