//! Symmetric eigensolvers and small dense helpers.
//!
//! Small problems go straight to a dense symmetric QR iteration. Larger ones
//! use a block Krylov basis with full reorthogonalization and Rayleigh-Ritz
//! extraction, grown until the wanted Ritz pairs have small residuals. The
//! block size lets repeated eigenvalues (symmetric fixtures) come out with
//! their full multiplicity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense problems up to this size are solved directly.
pub const DENSE_LIMIT: usize = 800;
const BLOCK: usize = 8;
const RESIDUAL_TOL: f64 = 1e-10;

/// Eigenpairs sorted by descending eigenvalue; eigenvectors are columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn truncate(mut self, k: usize) -> Self {
        self.values.truncate(k);
        self.vectors = self.vectors.columns(0, k).into_owned();
        self
    }
}

/// All eigenpairs of a symmetric matrix, descending.
pub fn dense_eigen(a: &DMatrix<f64>) -> EigenPairs {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    EigenPairs { values, vectors }
}

/// The `k` algebraically largest eigenpairs of a symmetric matrix.
pub fn top_eigenpairs(a: &DMatrix<f64>, k: usize) -> Result<EigenPairs> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix is not square",
            n,
            a.ncols()
        )));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "asked for {k} eigenpairs of a {n}x{n} matrix"
        )));
    }
    if n <= DENSE_LIMIT || 3 * k + 2 * BLOCK >= n {
        return Ok(dense_eigen(a).truncate(k));
    }
    block_krylov(a, k)
}

/// The `k` algebraically smallest eigenpairs, ascending.
pub fn bottom_eigenpairs(a: &DMatrix<f64>, k: usize) -> Result<EigenPairs> {
    let neg = -a;
    let mut pairs = top_eigenpairs(&neg, k)?;
    for v in &mut pairs.values {
        *v = -*v;
    }
    Ok(pairs)
}

fn block_krylov(a: &DMatrix<f64>, k: usize) -> Result<EigenPairs> {
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2c);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut images: Vec<DVector<f64>> = Vec::new();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE) * n as f64;

    let mut block: Vec<DVector<f64>> = (0..BLOCK).map(|_| random_vector(n, &mut rng)).collect();
    let mut next_check = (2 * k + 2 * BLOCK).min(n);
    loop {
        for mut v in block.drain(..) {
            if basis.len() == n {
                break;
            }
            let mut accepted = false;
            for _attempt in 0..3 {
                orthogonalize(&mut v, &basis);
                orthogonalize(&mut v, &basis);
                let norm = v.norm();
                if norm > 1e-10 {
                    v /= norm;
                    accepted = true;
                    break;
                }
                // invariant subspace reached in this direction; restart it
                v = random_vector(n, &mut rng);
            }
            if accepted {
                images.push(a * &v);
                basis.push(v);
            }
        }
        let m = basis.len();
        if m >= next_check || m == n {
            if let Some(pairs) = rayleigh_ritz(&basis, &images, k, scale, m == n) {
                return Ok(pairs);
            }
            if m == n {
                return Err(Error::ConvergenceFailure(
                    "Krylov basis exhausted without convergence".into(),
                ));
            }
            next_check = (m + 4 * BLOCK).min(n);
        }
        // next block: images of the most recent block
        let start = m.saturating_sub(BLOCK);
        block = images[start..m].to_vec();
        if block.is_empty() {
            block = (0..BLOCK).map(|_| random_vector(n, &mut rng)).collect();
        }
    }
}

fn rayleigh_ritz(
    basis: &[DVector<f64>],
    images: &[DVector<f64>],
    k: usize,
    scale: f64,
    exact: bool,
) -> Option<EigenPairs> {
    let m = basis.len();
    let n = basis[0].len();
    let v = DMatrix::from_columns(basis);
    let av = DMatrix::from_columns(images);
    let mut t = v.transpose() * &av;
    // symmetrize rounding noise
    let tt = t.transpose();
    t = (t + tt) * 0.5;
    let small = dense_eigen(&t).truncate(k.min(m));
    let ritz = &v * &small.vectors;
    if !exact {
        let aritz = &av * &small.vectors;
        for (j, &theta) in small.values.iter().enumerate() {
            let r = (aritz.column(j) - theta * ritz.column(j)).norm();
            if r > RESIDUAL_TOL * scale.max(1.0) {
                return None;
            }
        }
    }
    debug_assert_eq!(ritz.nrows(), n);
    Some(EigenPairs {
        values: small.values,
        vectors: ritz,
    })
}

fn orthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for q in basis {
        let c = q.dot(v);
        v.axpy(-c, q, 1.0);
    }
}

fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let gram = a.transpose() * a;
    let top = top_eigenpairs(&gram, 1)?;
    Ok(top.values[0].max(0.0).sqrt())
}

pub fn frobenius_norm(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Flips each column so its largest-magnitude entry (first on ties) is positive.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&b + b.transpose()) * 0.5
    }

    #[test]
    fn dense_is_sorted_and_orthonormal() {
        let a = random_symmetric(20, 1);
        let e = dense_eigen(&a);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DMatrix::identity(20, 20)).amax() < 1e-12);
        let recon = &e.vectors * DMatrix::from_diagonal(&DVector::from_vec(e.values.clone())) * e.vectors.transpose();
        assert!((recon - a).amax() < 1e-12);
    }

    #[test]
    fn krylov_matches_dense() {
        let n = 900;
        // smooth kernel: fast decaying spectrum like the diffusion operators
        let a = DMatrix::from_fn(n, n, |i, j| {
            let d = (i as f64 - j as f64) / 40.0;
            (-d * d).exp()
        });
        let dense = dense_eigen(&a);
        let k = 12;
        let kry = block_krylov(&a, k).unwrap();
        for j in 0..k {
            assert!((dense.values[j] - kry.values[j]).abs() < 1e-8 * dense.values[0]);
            let dot = dense.vectors.column(j).dot(&kry.vectors.column(j)).abs();
            assert!(dot > 1.0 - 1e-6, "vector {j}: {dot}");
        }
    }

    #[test]
    fn krylov_recovers_repeated_eigenvalues() {
        // block diagonal with two identical blocks -> every eigenvalue doubled
        let n = 450;
        let blk = DMatrix::from_fn(n, n, |i, j| {
            let d = (i as f64 - j as f64) / 30.0;
            (-d * d).exp()
        });
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, 0), (n, n)).copy_from(&blk);
        a.view_mut((n, n), (n, n)).copy_from(&blk);
        let e = block_krylov(&a, 6).unwrap();
        for p in 0..3 {
            assert!((e.values[2 * p] - e.values[2 * p + 1]).abs() < 1e-8 * e.values[0]);
        }
    }

    #[test]
    fn bottom_pairs_ascending() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]));
        let e = bottom_eigenpairs(&a, 2).unwrap();
        assert_eq!(e.values, vec![-1.0, 0.5]);
    }

    #[test]
    fn spectral_norm_of_known_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 5.0]);
        // singular values of [[3,0],[4,5]] are sqrt(45) and sqrt(5)
        assert!((spectral_norm(&a).unwrap() - 45f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sign_convention() {
        let mut m = DMatrix::from_column_slice(3, 2, &[0.1, -0.9, 0.2, 0.5, 0.5, -0.1]);
        fix_signs(&mut m);
        assert_eq!(m.column(0).as_slice(), &[-0.1, 0.9, -0.2]);
        assert_eq!(m.column(1).as_slice(), &[0.5, 0.5, -0.1]);
    }
}
