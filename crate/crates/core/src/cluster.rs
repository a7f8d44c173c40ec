//! Two-cluster K-means (Lloyd's algorithm with restarts) and the silhouette
//! coefficient, used for the grading-vs-volume separability check.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means with k = 2: Lloyd iterations from 10 random starts, keeping the
/// assignment with the lowest inertia. Deterministic given the seed.
pub fn kmeans2(points: &[Vec<f64>], seed: u64) -> Result<Vec<usize>> {
    if points.len() < 4 {
        return Err(Error::data(format!(
            "kmeans2 needs at least 4 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::data("kmeans2 points must share a positive dimension"));
    }
    const RESTARTS: usize = 10;
    const MAX_ITERS: usize = 100;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..RESTARTS {
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "kmeans-restart", restart as u64));
        // two distinct initial centroids
        let i = rng.below(points.len());
        let mut j = rng.below(points.len());
        let mut guard = 0;
        while points[j] == points[i] {
            j = rng.below(points.len());
            guard += 1;
            if guard > 4 * points.len() {
                // all points identical: single cluster is the honest answer
                return Err(Error::data("kmeans2 on identical points is degenerate"));
            }
        }
        let mut centroids = [points[i].clone(), points[j].clone()];
        let mut assign = vec![0usize; points.len()];
        for _ in 0..MAX_ITERS {
            let mut changed = false;
            for (pi, p) in points.iter().enumerate() {
                let d0 = sq_dist(p, &centroids[0]);
                let d1 = sq_dist(p, &centroids[1]);
                let a = usize::from(d1 < d0);
                if assign[pi] != a {
                    assign[pi] = a;
                    changed = true;
                }
            }
            // recompute centroids; reseed an emptied cluster with the point
            // farthest from the surviving centroid
            for c in 0..2 {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&assign)
                    .filter(|(_, &a)| a == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    let other = &centroids[1 - c];
                    let far = points
                        .iter()
                        .enumerate()
                        .max_by(|(_, p), (_, q)| {
                            sq_dist(p, other)
                                .partial_cmp(&sq_dist(q, other))
                                .expect("finite")
                        })
                        .map(|(i, _)| i)
                        .expect("nonempty points");
                    centroids[c] = points[far].clone();
                    changed = true;
                    continue;
                }
                let mut mean = vec![0.0f64; dim];
                for p in &members {
                    for (m, &v) in mean.iter_mut().zip(p.iter()) {
                        *m += v;
                    }
                }
                let inv = 1.0 / members.len() as f64;
                mean.iter_mut().for_each(|m| *m *= inv);
                centroids[c] = mean;
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        match &best {
            Some((bi, _)) if *bi <= inertia => {}
            _ => best = Some((inertia, assign)),
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Mean silhouette coefficient with Euclidean distance: per point,
/// (b - a) / max(a, b) where a is the mean distance to its own cluster and
/// b the smallest mean distance to another cluster.
pub fn silhouette(points: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    if points.len() != assignment.len() {
        return Err(Error::data("silhouette: assignment length mismatch"));
    }
    if points.len() < 4 {
        return Err(Error::data("silhouette needs at least 4 points"));
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::data("silhouette needs at least 2 clusters"));
    }
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::data("silhouette needs >= 2 points per cluster"));
    }
    let n = points.len();
    let mut total = 0.0f64;
    for i in 0..n {
        let mut dist_sum = vec![0.0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            dist_sum[assignment[j]] += sq_dist(&points[i], &points[j]).sqrt();
        }
        let own = assignment[i];
        let a = dist_sum[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| dist_sum[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tight_far_pairs_cluster_cleanly() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
        ];
        let assign = kmeans2(&points, 1).unwrap();
        assert_eq!(assign[0], assign[1]);
        assert_eq!(assign[2], assign[3]);
        assert_ne!(assign[0], assign[2]);
        let s = silhouette(&points, &assign).unwrap();
        assert!(s > 0.9, "silhouette = {s}");
    }

    #[test]
    fn regular_tetrahedron_silhouette_is_zero() {
        // pairwise equidistant points: a == b for every point
        let points = vec![
            vec![1.0, 1.0, 1.0],
            vec![1.0, -1.0, -1.0],
            vec![-1.0, 1.0, -1.0],
            vec![-1.0, -1.0, 1.0],
        ];
        let assign = vec![0, 0, 1, 1];
        assert_eq!(silhouette(&points, &assign).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_bounds_and_oracle() {
        let mut rng = Rng::seed_from_u64(5);
        for trial in 0..50 {
            let n = 6 + rng.below(20);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())
                .collect();
            let assign = kmeans2(&points, trial as u64).unwrap();
            if assign.iter().filter(|&&a| a == 0).count() < 2
                || assign.iter().filter(|&&a| a == 1).count() < 2
            {
                continue;
            }
            let s = silhouette(&points, &assign).unwrap();
            assert!((-1.0..=1.0).contains(&s), "s = {s}");

            // independent O(n^2) oracle written from the definition
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut acc = 0.0;
            for i in 0..n {
                let own: Vec<usize> = (0..n)
                    .filter(|&j| j != i && assign[j] == assign[i])
                    .collect();
                let other: Vec<usize> = (0..n).filter(|&j| assign[j] != assign[i]).collect();
                let a: f64 = own.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>()
                    / own.len() as f64;
                let b: f64 = other.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>()
                    / other.len() as f64;
                acc += (b - a) / a.max(b);
            }
            let oracle = acc / n as f64;
            assert!((s - oracle).abs() <= 1e-9, "trial {trial}: {s} vs {oracle}");
        }
    }

    #[test]
    fn kmeans_needs_four_points() {
        assert!(kmeans2(&[vec![0.0], vec![1.0], vec![2.0]], 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = Rng::seed_from_u64(9);
        let points: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..2).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        assert_eq!(kmeans2(&points, 4).unwrap(), kmeans2(&points, 4).unwrap());
    }

    #[test]
    fn singleton_cluster_is_error() {
        let points = vec![vec![0.0], vec![0.1], vec![0.2], vec![9.0]];
        let assign = vec![0, 0, 0, 1];
        assert!(silhouette(&points, &assign).is_err());
    }
}
