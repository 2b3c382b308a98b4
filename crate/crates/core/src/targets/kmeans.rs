//! Exact Lloyd k-means with k-means++ initialization.
//!
//! Deterministic under a fixed seed: initialization draws from a seeded
//! stream, iteration order is data order, and all ties break to the lowest
//! index. Empty clusters are reseeded to the point farthest from its
//! assigned centroid.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::num::{c, Real};
use crate::rng::{stream_rng, Purpose};

#[derive(Debug, Clone)]
pub struct KMeansModel<F> {
    /// k x d centroid matrix.
    pub centroids: Array2<F>,
    pub iterations: usize,
    pub inertia: F,
}

fn sq_dist<F: Real>(a: ArrayView1<F>, b: ArrayView1<F>) -> F {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest<F: Real>(point: ArrayView1<F>, centroids: &Array2<F>) -> (usize, F) {
    let mut best = 0usize;
    let mut best_d = sq_dist(point, centroids.row(0));
    for (j, row) in centroids.outer_iter().enumerate().skip(1) {
        let d = sq_dist(point, row);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init<F: Real>(points: ArrayView2<F>, k: usize, seed: u64) -> Array2<F> {
    let n = points.nrows();
    let d = points.ncols();
    let mut rng = stream_rng(seed, Purpose::KMeansInit, 0);
    let mut centroids = Array2::<F>::zeros((k, d));

    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));

    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)).to_f64().unwrap())
        .collect();

    for j in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut dart = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with chosen centroids.
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for i in 0..n {
            let dnew = sq_dist(points.row(i), centroids.row(j)).to_f64().unwrap();
            if dnew < dist2[i] {
                dist2[i] = dnew;
            }
        }
    }
    centroids
}

/// Fits k-means on `points` (n x d). Runs Lloyd iterations until the
/// assignment reaches a fixpoint or `max_iters`.
pub fn kmeans_fit<F: Real>(
    points: ArrayView2<F>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansModel<F>> {
    let n = points.nrows();
    if n < k {
        return Err(Error::TooFewPoints { k, n });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let d = points.ncols();
    let mut centroids = kmeans_pp_init(points, k, seed);
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;

    for iter in 0..max_iters.max(1) {
        iterations = iter + 1;
        let mut changed = false;
        for i in 0..n {
            let (j, _) = nearest(points.row(i), &centroids);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }

        let mut sums = Array2::<F>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            let mut row = sums.row_mut(j);
            row += &points.row(i);
            counts[j] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = c::<F>(1.0) / c::<F>(counts[j] as f64);
                let mut row = centroids.row_mut(j);
                row.assign(&(&sums.row(j) * inv));
            }
        }

        // Reseed empty clusters to the point farthest from its own centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let mut far_i = 0usize;
                let mut far_d = F::neg_infinity();
                for i in 0..n {
                    let dcur = sq_dist(points.row(i), centroids.row(assignment[i]));
                    if dcur > far_d {
                        far_d = dcur;
                        far_i = i;
                    }
                }
                centroids.row_mut(j).assign(&points.row(far_i));
                assignment[far_i] = j;
            }
        }

        if !changed {
            break;
        }
    }

    let inertia = (0..n)
        .map(|i| nearest(points.row(i), &centroids).1)
        .sum::<F>();
    Ok(KMeansModel {
        centroids,
        iterations,
        inertia,
    })
}

/// Nearest-centroid labels for `latents` (T x d), squared Euclidean, ties to
/// the lowest index.
pub fn assign_clusters<F: Real>(model: &KMeansModel<F>, latents: ArrayView2<F>) -> Result<Vec<u32>> {
    if latents.ncols() != model.centroids.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "latent dim {} vs centroid dim {}",
            latents.ncols(),
            model.centroids.ncols()
        )));
    }
    Ok(latents
        .axis_iter(Axis(0))
        .map(|row| nearest(row, &model.centroids).0 as u32)
        .collect())
}
