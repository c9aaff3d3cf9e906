//! Lloyd's K-means with k-means++ seeding.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment step, in iteration order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lower index) and the squared distance.
fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>, out: &mut [usize], dist: &mut [f64]) {
    for (i, p) in points.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out[i] = best;
        dist[i] = best_d;
    }
}

/// Refills each empty cluster with the point farthest from its own centroid,
/// taken only from clusters that keep at least one member.
fn fill_empty(
    points: ArrayView2<f64>,
    centroids: &mut Array2<f64>,
    assignments: &mut [usize],
    dist: &mut [f64],
) {
    let k = centroids.nrows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = donor else { break };
        sizes[assignments[i]] -= 1;
        sizes[c] += 1;
        assignments[i] = c;
        dist[i] = 0.0;
        centroids.row_mut(c).assign(&points.row(i));
    }
}

fn kmeans_pp(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `points` into `k` groups.
///
/// Stops once no centroid moves by `tol` or more (Euclidean), or after
/// `max_iters` updates. The returned assignment is recomputed against the
/// final centroids, so it is a fixed point of the assignment step.
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Input(format!("{n} points cannot form {k} clusters")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("points contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        assign(points, &centroids, &mut assignments, &mut dist);
        fill_empty(points, &mut centroids, &mut assignments, &mut dist);
        history.push(dist.iter().sum());
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = Array1::<f64>::zeros(k);
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
            counts[assignments[i]] += 1.0;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0.0 {
                continue;
            }
            let new = sums.row(c).mapv(|v| v / counts[c]);
            shift = shift.max(sq_dist(new.view(), centroids.row(c)).sqrt());
            centroids.row_mut(c).assign(&new);
        }
        if shift < tol {
            assign(points, &centroids, &mut assignments, &mut dist);
            fill_empty(points, &mut centroids, &mut assignments, &mut dist);
            history.push(dist.iter().sum());
            break;
        }
    }

    let inertia = *history.last().expect("at least one assignment step");
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        history,
        iterations,
    })
}
