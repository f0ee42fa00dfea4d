//! Diffusion maps: Gaussian kernel operators, their spectra through the
//! symmetric conjugate, diffusion distances and semigroup-error tuning of
//! the diffusion time.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{fix_signs, spectral_norm, top_eigenpairs};

/// Kernel entries below this are dropped before row normalization.
pub const TRUNCATION: f64 = 1e-14;

/// Row-stochastic diffusion operator `H = D^-1 K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOperator {
    /// Row-normalized operator.
    pub h: DMatrix<f64>,
    /// Unnormalized symmetric kernel after truncation.
    pub kernel: DMatrix<f64>,
    /// Row sums of `kernel`.
    pub degrees: DVector<f64>,
    pub t: f64,
}

impl DiffusionOperator {
    /// Normalizes a nonnegative symmetric kernel.
    pub fn from_kernel(kernel: DMatrix<f64>, t: f64) -> Result<Self> {
        let n = kernel.nrows();
        if kernel.ncols() != n {
            return Err(Error::ShapeMismatch(format!("{}x{} kernel", n, kernel.ncols())));
        }
        let degrees = DVector::from_iterator(n, kernel.row_iter().map(|r| r.sum()));
        if let Some(i) = degrees.iter().position(|d| !(*d > 0.0)) {
            return Err(Error::IsolatedRow(i));
        }
        let mut h = kernel.clone();
        for (i, mut row) in h.row_iter_mut().enumerate() {
            row /= degrees[i];
        }
        Ok(Self { h, kernel, degrees, t })
    }

    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    /// `D^-1/2 K D^-1/2`, similar to `H`.
    pub fn symmetric_conjugate(&self) -> DMatrix<f64> {
        let inv_sqrt: Vec<f64> = self.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        DMatrix::from_fn(self.len(), self.len(), |i, j| {
            self.kernel[(i, j)] * inv_sqrt[i] * inv_sqrt[j]
        })
    }
}

pub(crate) fn check_distances(dist: &DMatrix<f64>) -> Result<()> {
    let n = dist.nrows();
    if dist.ncols() != n {
        return Err(Error::ShapeMismatch(format!("{}x{} distance matrix", n, dist.ncols())));
    }
    let scale = dist.amax().max(1.0);
    for i in 0..n {
        if dist[(i, i)].abs() > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!("nonzero self-distance at {i}")));
        }
        for j in 0..i {
            let (a, b) = (dist[(i, j)], dist[(j, i)]);
            if !a.is_finite() || a < 0.0 || (a - b).abs() > 1e-9 * scale {
                return Err(Error::InvalidArgument(format!("bad distance pair at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `exp(-dist²/4t)` with tiny entries truncated, then row-normalized.
pub fn build_diffusion_kernel(dist: &DMatrix<f64>, t: f64) -> Result<DiffusionOperator> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidBandwidth(t));
    }
    check_distances(dist)?;
    let n = dist.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    // symmetrize so both triangles see the same value
                    let d = 0.5 * (dist[(i, j)] + dist[(j, i)]);
                    let w = (-d * d / (4.0 * t)).exp();
                    if w < TRUNCATION {
                        0.0
                    } else {
                        w
                    }
                })
                .collect()
        })
        .collect();
    let kernel = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    DiffusionOperator::from_kernel(kernel, t)
}

/// Leading eigenpairs of a diffusion operator: eigenvalue 1 with a
/// constant eigenvector first, then `L` informative pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// Descending, length L + 1.
    pub eigenvalues: Vec<f64>,
    /// Right eigenvectors of `H` as columns (n x (L + 1)), normalized so
    /// that `D^1/2 Ψ` is orthonormal.
    pub vectors: DMatrix<f64>,
}

impl SpectralBasis {
    /// Number of informative pairs (excluding the trivial one).
    pub fn informative(&self) -> usize {
        self.eigenvalues.len().saturating_sub(1)
    }

    pub fn point_count(&self) -> usize {
        self.vectors.nrows()
    }

    /// λ^γ with negative eigenvalues clamped to zero.
    pub fn weight(&self, l: usize, gamma: f64) -> f64 {
        let lam = self.eigenvalues[l].max(0.0);
        if gamma == 0.0 {
            1.0
        } else {
            lam.powf(gamma)
        }
    }

    /// Diffusion coordinates `λ_l^{γ/2} Ψ_l`, l = 1..=L, one row per point.
    pub fn coordinates(&self, gamma: f64) -> DMatrix<f64> {
        let l = self.informative();
        DMatrix::from_fn(self.point_count(), l, |i, c| {
            self.weight(c + 1, gamma / 2.0) * self.vectors[(i, c + 1)]
        })
    }
}

/// Decomposes through the symmetric conjugate and maps back by `D^-1/2`.
/// Each eigenvector's largest-magnitude entry is made positive.
pub fn spectral_decompose(op: &DiffusionOperator, l: usize) -> Result<SpectralBasis> {
    let n = op.len();
    if l >= n {
        return Err(Error::InvalidArgument(format!(
            "asked for {l} nontrivial eigenpairs of {n} points"
        )));
    }
    let pairs = top_eigenpairs(&op.symmetric_conjugate(), l + 1)?;
    let mut vectors = pairs.vectors;
    for (i, mut row) in vectors.row_iter_mut().enumerate() {
        row /= op.degrees[i].sqrt();
    }
    fix_signs(&mut vectors);
    Ok(SpectralBasis {
        eigenvalues: pairs.values,
        vectors,
    })
}

/// D_γ(i, j) = sqrt(Σ_{l=1..L} λ_l^γ (Ψ_l(i) - Ψ_l(j))²).
pub fn diffusion_distance(basis: &SpectralBasis, gamma: f64, i: usize, j: usize) -> Result<f64> {
    let n = basis.point_count();
    for index in [i, j] {
        if index >= n {
            return Err(Error::IndexOutOfRange { index, size: n });
        }
    }
    let sum: f64 = (1..basis.eigenvalues.len())
        .map(|l| basis.weight(l, gamma) * (basis.vectors[(i, l)] - basis.vectors[(j, l)]).powi(2))
        .sum();
    Ok(sum.sqrt())
}

/// All pairwise diffusion distances.
pub fn diffusion_distance_matrix(basis: &SpectralBasis, gamma: f64) -> DMatrix<f64> {
    let coords = basis.coordinates(gamma);
    let n = coords.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (coords.row(i) - coords.row(j)).norm();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// ‖A² - B‖ in the spectral norm.
pub fn semigroup_error_of(h_t: &DMatrix<f64>, h_2t: &DMatrix<f64>) -> Result<f64> {
    if h_t.shape() != h_2t.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", h_t.shape(), h_2t.shape())));
    }
    spectral_norm(&(h_t * h_t - h_2t))
}

/// SGE(t) = ‖H_t² - H_2t‖ for kernels built from the same distances.
pub fn semigroup_error(dist: &DMatrix<f64>, t: f64) -> Result<f64> {
    let h_t = build_diffusion_kernel(dist, t)?;
    let h_2t = build_diffusion_kernel(dist, 2.0 * t)?;
    semigroup_error_of(&h_t.h, &h_2t.h)
}

/// Times at which some point keeps less than this share of its kernel mass
/// off the diagonal are skipped by tuning: there `H_t` is numerically the
/// identity and its semigroup error is trivially zero.
pub const MIN_OFF_DIAGONAL_MASS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeTuning {
    pub t: f64,
    /// (t, SGE) for every grid point; None where the kernel failed.
    pub curve: Vec<(f64, Option<f64>)>,
    /// Grid times skipped because the kernel had not spread yet.
    pub skipped: Vec<f64>,
}

/// Smallest share of a row's kernel mass that lies off the diagonal.
pub fn min_off_diagonal_mass(op: &DiffusionOperator) -> f64 {
    (0..op.len()).map(|i| 1.0 - op.h[(i, i)]).fold(f64::INFINITY, f64::min)
}

/// Grid minimizer of the semigroup error over the times at which every
/// point already diffuses (see [`MIN_OFF_DIAGONAL_MASS`]); ties go to the
/// smaller time. If no grid time qualifies, all of them are considered.
pub fn tune_time(dist: &DMatrix<f64>, grid: &[f64]) -> Result<TimeTuning> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("time grid must be strictly ascending".into()));
    }
    check_distances(dist)?;
    let mut curve = Vec::with_capacity(grid.len());
    let mut spread = Vec::with_capacity(grid.len());
    for &t in grid {
        match semigroup_point(dist, t) {
            Ok((e, m)) => {
                curve.push((t, Some(e)));
                spread.push(m >= MIN_OFF_DIAGONAL_MASS);
            }
            Err(err) => {
                log::warn!("semigroup error at t = {t} failed: {err}");
                curve.push((t, None));
                spread.push(false);
            }
        }
    }
    let (t, skipped) = pick_time(&curve, &spread)?;
    Ok(TimeTuning { t, curve, skipped })
}

/// Semigroup error at `t` together with the kernel's smallest off-diagonal
/// row mass.
pub fn semigroup_point(dist: &DMatrix<f64>, t: f64) -> Result<(f64, f64)> {
    let h_t = build_diffusion_kernel(dist, t)?;
    let h_2t = build_diffusion_kernel(dist, 2.0 * t)?;
    Ok((semigroup_error_of(&h_t.h, &h_2t.h)?, min_off_diagonal_mass(&h_t)))
}

/// Lowest-error time among the spread ones (all of them if none spread).
pub(crate) fn pick_time(curve: &[(f64, Option<f64>)], spread: &[bool]) -> Result<(f64, Vec<f64>)> {
    let any_spread = spread.iter().any(|&s| s);
    if !any_spread {
        log::warn!("no grid time lets every point diffuse; tuning over the whole grid");
    }
    let mut best: Option<(f64, f64)> = None;
    let mut skipped = Vec::new();
    for (&(t, e), &ok) in curve.iter().zip(spread) {
        let Some(e) = e else { continue };
        if any_spread && !ok {
            skipped.push(t);
            continue;
        }
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((t, e));
        }
    }
    let (t, _) = best.ok_or_else(|| Error::ConvergenceFailure("every grid point failed".into()))?;
    Ok((t, skipped))
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Median of the squared off-diagonal distances.
pub fn median_squared_distance(dist: &DMatrix<f64>) -> f64 {
    let n = dist.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| dist[(i, j)].powi(2))
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Default tuning grid: 16 log-spaced times over [1e-3, 1] x the median
/// squared distance.
pub fn default_time_grid(dist: &DMatrix<f64>) -> Vec<f64> {
    let m = median_squared_distance(dist).max(f64::MIN_POSITIVE);
    log_grid(1e-3 * m, m, 16)
}

/// Classical multidimensional scaling into `dims` coordinates.
pub fn classical_mds(dist: &DMatrix<f64>, dims: usize) -> Result<DMatrix<f64>> {
    check_distances(dist)?;
    let n = dist.nrows();
    let dims = dims.min(n);
    let sq = dist.map(|d| d * d);
    let row_means: Vec<f64> = sq.row_iter().map(|r| r.sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let pairs = top_eigenpairs(&b, dims)?;
    Ok(DMatrix::from_fn(n, dims, |i, c| {
        pairs.vectors[(i, c)] * pairs.values[c].max(0.0).sqrt()
    }))
}

/// Euclidean distance matrix between the rows of `x`.
pub fn pairwise_euclidean(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (x.row(i) - x.row(j)).norm();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}
