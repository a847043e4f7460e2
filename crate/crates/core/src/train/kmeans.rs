//! Per-class k-means casebase selection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::qbaf::Case;

const MAX_ITERATIONS: usize = 100;
const SHIFT_TOLERANCE: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the point nearest to `target`; ties go to the lowest index.
fn nearest<'a>(points: impl Iterator<Item = &'a [f64]>, target: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.enumerate() {
        let d = sq_dist(p, target);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn plus_plus_seed<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next].to_vec();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Returns the centroids.
pub fn lloyd<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let width = points[0].len();
    let mut centroids = plus_plus_seed(points, k, rng);
    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; width]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = nearest(centroids.iter().map(Vec::as_slice), p);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    centroids
}

/// Selects up to `k` representatives per class: the data points nearest each
/// k-means centroid, deduplicated. Classes with at most `k` points keep all of them.
pub fn kmeans_casebase<R: Rng + ?Sized>(train: &[Case], k: usize, num_classes: usize, rng: &mut R) -> Result<Vec<Case>> {
    if k == 0 {
        return Err(Error::Config("clusters_per_class must be at least 1".into()));
    }
    let mut casebase = Vec::new();
    for class in 0..num_classes {
        let members: Vec<&Case> = train.iter().filter(|c| c.label == class).collect();
        if members.is_empty() {
            return Err(Error::Config(format!("class {class} has no training samples")));
        }
        if members.len() <= k {
            casebase.extend(members.into_iter().cloned());
            continue;
        }
        let points: Vec<&[f64]> = members.iter().map(|c| c.x.as_slice()).collect();
        let centroids = lloyd(&points, k, rng);
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for c in &centroids {
            let idx = nearest(points.iter().copied(), c);
            if !chosen.contains(&idx) {
                chosen.push(idx);
            }
        }
        casebase.extend(chosen.into_iter().map(|i| members[i].clone()));
    }
    Ok(casebase)
}
