//! Seeded k-means and cluster-quality scores.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registration::solve_assignment;

const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Zero-based cluster of every row.
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
    /// Times a cluster emptied out and was re-seeded, over all restarts.
    pub reseeds: usize,
    /// Clusters still empty in the returned solution.
    pub empty_clusters: usize,
}

fn sq_dist_row(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(c.row(k).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn plus_plus_init(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut centers = DMatrix::zeros(k, x.ncols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&x.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist_row(x, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&x.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist_row(x, i, &centers, c));
        }
    }
    centers
}

fn assign(x: &DMatrix<f64>, centers: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = (0..x.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..centers.nrows() {
                let d = sq_dist_row(x, i, centers, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            inertia += best.1;
            best.0
        })
        .collect();
    (labels, inertia)
}

fn lloyd(x: &DMatrix<f64>, mut centers: DMatrix<f64>) -> (KMeans, usize) {
    let k = centers.nrows();
    let mut reseeds = 0;
    let mut reseeded = vec![false; k];
    let (mut labels, mut inertia) = assign(x, &centers);
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = DMatrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += x.row(i);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).copy_from(&(sums.row(c) / counts[c] as f64));
            } else if !reseeded[c] {
                // move the empty center onto the point worst served by its center
                let far = (0..x.nrows())
                    .max_by(|&a, &b| {
                        sq_dist_row(x, a, &centers, labels[a])
                            .total_cmp(&sq_dist_row(x, b, &centers, labels[b]))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers.row_mut(c).copy_from(&x.row(far));
                reseeded[c] = true;
                reseeds += 1;
            }
        }
        let (next, next_inertia) = assign(x, &centers);
        inertia = next_inertia;
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    let empty_clusters = counts.iter().filter(|&&c| c == 0).count();
    (
        KMeans {
            labels,
            centers,
            inertia,
            reseeds: 0,
            empty_clusters,
        },
        reseeds,
    )
}

/// k-means++ initialization and Lloyd iterations, repeated `restarts`
/// times from one seeded stream; the lowest-inertia run wins (earliest on
/// ties).
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one cluster".into()));
    }
    if k > n {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    let mut reseeds = 0;
    for _ in 0..restarts.max(1) {
        let centers = plus_plus_init(x, k, &mut rng);
        let (run, r) = lloyd(x, centers);
        reseeds += r;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    best.reseeds = reseeds;
    if best.empty_clusters > 0 {
        log::warn!("k-means finished with {} empty clusters", best.empty_clusters);
    }
    Ok(best)
}

/// Mean silhouette over all points for a precomputed distance matrix.
/// Points in singleton clusters score 0.
pub fn silhouette(dist: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if dist.nrows() != n || dist.ncols() != n {
        return Err(Error::LengthMismatch(dist.nrows(), n));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[(i, j)];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Fraction of points on which two labelings agree under the best
/// one-to-one matching of their labels.
pub fn partition_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let k = a.iter().chain(b).max().unwrap() + 1;
    let mut cost = DMatrix::zeros(k, k);
    for (&x, &y) in a.iter().zip(b) {
        cost[(x, y)] -= 1.0;
    }
    let matching = solve_assignment(&cost)?;
    let agree: f64 = matching.iter().enumerate().map(|(x, &y)| -cost[(x, y)]).sum();
    Ok(agree / a.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::pairwise_euclidean;
    use rand_distr::{Distribution, Normal};

    fn blobs(per: usize, centers: &[[f64; 2]], spread: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(center[0] + noise.sample(&mut rng));
                rows.push(center[1] + noise.sample(&mut rng));
                labels.push(c);
            }
        }
        (DMatrix::from_row_slice(labels.len(), 2, &rows), labels)
    }

    #[test]
    fn recovers_separated_blobs() {
        let (x, truth) = blobs(20, &[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]], 0.3, 1);
        let km = kmeans(&x, 3, 7, 10).unwrap();
        assert_eq!(partition_agreement(&km.labels, &truth).unwrap(), 1.0);
        assert_eq!(km.empty_clusters, 0);
    }

    #[test]
    fn single_cluster_and_determinism() {
        let (x, _) = blobs(10, &[[0.0, 0.0], [3.0, 3.0]], 1.0, 2);
        assert!(kmeans(&x, 1, 0, 3).unwrap().labels.iter().all(|&l| l == 0));
        assert_eq!(kmeans(&x, 2, 5, 10).unwrap(), kmeans(&x, 2, 5, 10).unwrap());
        assert!(kmeans(&x, 0, 0, 1).is_err());
        assert!(kmeans(&x, 21, 0, 1).is_err());
    }

    #[test]
    fn inertia_matches_assignment() {
        let (x, _) = blobs(15, &[[0.0, 0.0], [2.0, 1.0]], 0.8, 3);
        let km = kmeans(&x, 2, 1, 5).unwrap();
        let direct: f64 = (0..x.nrows())
            .map(|i| sq_dist_row(&x, i, &km.centers, km.labels[i]))
            .sum();
        assert!((direct - km.inertia).abs() < 1e-9);
    }

    #[test]
    fn duplicate_points_force_empty_cluster_handling() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let km = kmeans(&x, 2, 0, 1).unwrap();
        assert_eq!(km.inertia, 0.0);
    }

    #[test]
    fn silhouette_hand_example() {
        // clusters {0, 1} at 0 and 1, {2} alone at 10 (singleton scores 0)
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 10.0]);
        let d = pairwise_euclidean(&x);
        let s = silhouette(&d, &[0, 0, 1]).unwrap();
        let s0 = (10.0 - 1.0) / 10.0;
        let s1 = (9.0 - 1.0) / 9.0;
        assert!((s - (s0 + s1) / 3.0).abs() < 1e-12);
        assert!(silhouette(&d, &[0, 0, 0]).is_err());
    }

    #[test]
    fn agreement_ignores_label_names() {
        assert_eq!(partition_agreement(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap(), 1.0);
        assert_eq!(partition_agreement(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]) - 1.0).abs() < 1e-12);
    }
}
