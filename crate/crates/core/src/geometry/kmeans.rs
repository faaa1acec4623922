use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::spatial::{SpatialFeature, SPATIAL_DIM};
use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::rng::seeded;

pub const MAX_ITERATIONS: usize = 300;

/// Outcome of a Lloyd run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Inertia measured after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(point, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: each new center is drawn with probability
/// proportional to its squared distance from the centers chosen so far.
fn seed_centers(points: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.gen_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while d2[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// at the point farthest from its current center.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iterations: usize) -> Result<KMeansFit> {
    let n = points.rows();
    if n == 0 {
        bail!(Config, "k-means needs at least one point");
    }
    if k == 0 || n < k {
        bail!(Config, "k-means needs 1 <= K <= N, got K={k}, N={n}");
    }
    let mut rng = seeded(seed);
    let mut centers = seed_centers(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centers);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = d;
            inertia += d;
        }
        inertia_history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                counts[assignments[far]] -= 1;
                counts[c] = 1;
                assignments[far] = c;
                dists[far] = 0.0;
                centers.row_mut(c).copy_from_slice(points.row(far));
            }
        }
    }
    Ok(KMeansFit { centers, assignments, inertia_history, iterations, converged })
}

/// K cluster centers of interactive-pair spatial features.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSpatialPatterns {
    /// `K × SPATIAL_DIM`.
    pub centers: Matrix,
    pub seed: u64,
}

impl GlobalSpatialPatterns {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn from_centers(centers: Matrix, seed: u64) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() != SPATIAL_DIM || !centers.is_finite() {
            bail!(InvalidInput, "global spatial patterns must be K x {SPATIAL_DIM} finite, got {:?}", centers.shape());
        }
        Ok(Self { centers, seed })
    }
}

/// Fits `k` global spatial patterns to the given pair features.
pub fn fit_global_spatial_patterns(features: &[SpatialFeature], k: usize, seed: u64) -> Result<GlobalSpatialPatterns> {
    let mut points = Matrix::zeros(features.len(), SPATIAL_DIM);
    for (i, f) in features.iter().enumerate() {
        points.row_mut(i).copy_from_slice(f.as_slice());
    }
    let fit = kmeans(&points, k, seed, MAX_ITERATIONS)?;
    Ok(GlobalSpatialPatterns { centers: fit.centers, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feat(v: f64) -> SpatialFeature {
        SpatialFeature([v; SPATIAL_DIM])
    }

    #[test]
    fn single_cluster_of_copies() {
        let p = SpatialFeature(core::array::from_fn(|i| i as f64 * 0.1));
        let gsp = fit_global_spatial_patterns(&[p; 10], 1, 3).unwrap();
        for (c, v) in gsp.centers.row(0).iter().zip(p.as_slice()) {
            assert!((c - v).abs() < 1e-12);
        }
    }

    /// Exhaustive search over all 2^20 two-way partitions for the minimum
    /// within-cluster sum of squares.
    fn best_partition_centers(points: &[SpatialFeature]) -> [[f64; SPATIAL_DIM]; 2] {
        let n = points.len();
        let mut best = (f64::INFINITY, [[0.0; SPATIAL_DIM]; 2]);
        for mask in 1u32..(1 << n) - 1 {
            let mut sums = [[0.0; SPATIAL_DIM]; 2];
            let mut counts = [0usize; 2];
            for (i, p) in points.iter().enumerate() {
                let side = ((mask >> i) & 1) as usize;
                counts[side] += 1;
                for (s, v) in sums[side].iter_mut().zip(&p.0) {
                    *s += v;
                }
            }
            let means = [0, 1].map(|s| sums[s].map(|v| v / counts[s] as f64));
            let cost: f64 = points.iter().enumerate().map(|(i, p)| sq_dist(&p.0, &means[((mask >> i) & 1) as usize])).sum();
            if cost < best.0 {
                best = (cost, means);
            }
        }
        best.1
    }

    #[test]
    fn two_separated_groups() {
        let mut pts = vec![feat(0.0); 10];
        pts.extend(vec![feat(10.0); 10]);
        let oracle = best_partition_centers(&pts);
        let mut want: Vec<[f64; SPATIAL_DIM]> = oracle.to_vec();
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(want, vec![[0.0; SPATIAL_DIM], [10.0; SPATIAL_DIM]]);
        for seed in 0..5 {
            let gsp = fit_global_spatial_patterns(&pts, 2, seed).unwrap();
            let mut got: Vec<Vec<f64>> = (0..2).map(|r| gsp.centers.row(r).to_vec()).collect();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(got, want.iter().map(|w| w.to_vec()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn one_point_per_cluster() {
        let pts: Vec<_> = (0..6).map(|i| feat(i as f64)).collect();
        let m = Matrix::from_rows(&pts.iter().map(|p| p.0.to_vec()).collect::<Vec<_>>());
        let fit = kmeans(&m, 6, 11, MAX_ITERATIONS).unwrap();
        assert_eq!(fit.inertia(), 0.0);
        let mut rows: Vec<f64> = (0..6).map(|r| fit.centers.get(r, 0)).collect();
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn configuration_errors() {
        assert!(fit_global_spatial_patterns(&[], 1, 0).is_err());
        assert!(fit_global_spatial_patterns(&[feat(1.0)], 2, 0).is_err());
        assert!(fit_global_spatial_patterns(&[feat(1.0)], 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn inertia_never_increases_and_ends_at_fixed_point(
            raw in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 4..40),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            prop_assume!(raw.len() >= k);
            let m = Matrix::from_rows(&raw);
            let fit = kmeans(&m, k, seed, MAX_ITERATIONS).unwrap();
            for w in fit.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(fit.converged);
            for i in 0..m.rows() {
                let (c, d) = nearest(m.row(i), &fit.centers);
                let own = sq_dist(m.row(i), fit.centers.row(fit.assignments[i]));
                prop_assert!(c == fit.assignments[i] || (own - d).abs() < 1e-12);
            }
        }

        #[test]
        fn deterministic_given_seed(seed in 0u64..100) {
            let raw: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
            let m = Matrix::from_rows(&raw);
            prop_assert_eq!(kmeans(&m, 4, seed, MAX_ITERATIONS).unwrap(), kmeans(&m, 4, seed, MAX_ITERATIONS).unwrap());
        }
    }
}
