//! Lloyd's K-means with k-means++ seeding.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent seeded restarts; the lowest-inertia result wins.
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// `d × k`, one center per column.
    pub centers: DMatrix<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its center.
    pub inertia: f64,
    pub iterations: usize,
}

/// Centers of `k` clusters of the columns of `points` (`d × n`).
pub fn kmeans_centers(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<DMatrix<f64>> {
    Ok(kmeans(
        points,
        &KMeansOptions {
            k,
            seed,
            max_iter,
            restarts: 1,
        },
    )?
    .centers)
}

pub fn kmeans(points: &DMatrix<f64>, opts: &KMeansOptions) -> Result<Clustering> {
    if opts.k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if opts.max_iter == 0 {
        return Err(Error::invalid("max_iter", "must be at least 1"));
    }
    if opts.restarts == 0 {
        return Err(Error::invalid("restarts", "must be at least 1"));
    }
    let distinct = count_distinct(points);
    if opts.k > distinct {
        return Err(Error::invalid(
            "k",
            format!("{} clusters requested but only {distinct} distinct points", opts.k),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..opts.restarts {
        let c = lloyd(points, opts.k, opts.max_iter, &mut rng);
        if best.as_ref().map_or(true, |b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn count_distinct(points: &DMatrix<f64>) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .column_iter()
        .map(|c| c.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    points
        .column(i)
        .iter()
        .zip(centers.column(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.ncols() {
        let d = sq_dist(points, i, centers, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (d, n) = points.shape();
    let mut centers = DMatrix::zeros(d, k);
    centers.set_column(0, &points.column(rng.gen_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if dist[chosen] == 0.0 {
                chosen = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.set_column(c, &points.column(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let (d, n) = points.shape();
    let mut centers = plus_plus_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (c, _) = nearest(points, i, &centers);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        recompute_centers(points, &mut assignment, &mut centers, d);
    }
    // Centers must be means of their final clusters even when max_iter cut the loop short.
    recompute_centers(points, &mut assignment, &mut centers, d);
    let inertia = (0..n).map(|i| sq_dist(points, i, &centers, assignment[i])).sum();
    Clustering {
        centers,
        assignment,
        inertia,
        iterations,
    }
}

/// Sets every center to the mean of its cluster. An empty cluster takes over the point
/// farthest from its current center.
fn recompute_centers(points: &DMatrix<f64>, assignment: &mut [usize], centers: &mut DMatrix<f64>, d: usize) {
    let k = centers.ncols();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let far = (0..assignment.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&i, &j| {
                sq_dist(points, i, centers, assignment[i]).total_cmp(&sq_dist(points, j, centers, assignment[j]))
            })
            .expect("k does not exceed the number of points");
        assignment[far] = empty;
        centers.set_column(empty, &points.column(far));
    }
    let mut sums = DMatrix::zeros(d, k);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        let mut col = sums.column_mut(a);
        col += points.column(i);
        counts[a] += 1;
    }
    for c in 0..k {
        centers.set_column(c, &(sums.column(c) / counts[c] as f64));
    }
}
