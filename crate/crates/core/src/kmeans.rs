//! Seeded Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{squared_distance, Matrix};

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Number of centroids equal to an earlier centroid.
    pub duplicate_centroids: usize,
}

/// Index of the nearest row of `centroids`, lowest index on ties.
pub fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Clusters the rows of `samples` into `k` groups. Requires `samples.rows() >= k >= 1`.
pub fn kmeans(samples: &Matrix, k: usize, seed: u64, max_iter: usize) -> KMeans {
    assert!(k >= 1 && samples.rows() >= k, "need at least k samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.rows();
    let dim = samples.cols();

    // k-means++ seeding
    let mut centroids = Matrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(samples.row(first));
    let mut closest: Vec<f64> = (0..n)
        .map(|i| squared_distance(samples.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in closest.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(samples.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(squared_distance(samples.row(i), centroids.row(c)));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (best, _) = nearest(samples.row(i), &centroids);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(samples.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }

    let duplicate_centroids = (1..k)
        .filter(|&c| (0..c).any(|p| centroids.row(p) == centroids.row(c)))
        .count();
    KMeans {
        centroids,
        assignments,
        iterations,
        duplicate_centroids,
    }
}
