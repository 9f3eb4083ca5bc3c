//! Lloyd's k-means with k-means++ seeding, used by the reconstruction-only baseline.

use rand::Rng;

use crate::error::{invalid_arg, Result};
use crate::numerics::{seeded_rng, squared_distance, SeededRng};

const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of the fitted points to their centroid.
    pub inertia: f64,
}

impl KMeans {
    /// Best of `restarts` fits by inertia. `k` is capped at the number of points.
    pub fn fit(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid_arg!("k-means needs at least one point"));
        }
        if k == 0 || restarts == 0 {
            return Err(invalid_arg!("k and restarts must be positive"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(invalid_arg!("k-means points of unequal dimension"));
        }
        let k = k.min(points.len());
        let mut rng = seeded_rng(seed);
        let mut best: Option<KMeans> = None;
        for _ in 0..restarts {
            let fit = lloyd(points, plus_plus(points, k, &mut rng));
            if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
                best = Some(fit);
            }
        }
        Ok(best.expect("restarts >= 1"))
    }

    /// Index of the nearest centroid (lowest index on ties).
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, squared_distance(c, x)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (j, _) = nearest(&centroids, p);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            // An emptied cluster keeps its previous position.
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let inertia = points.iter().map(|p| nearest(&centroids, p).1).sum();
    KMeans { centroids, inertia }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_groups() {
        let mut points = Vec::new();
        for i in 0..10 {
            let e = i as f64 * 0.01;
            points.push(vec![0.0 + e, 0.0]);
            points.push(vec![5.0 + e, 5.0]);
        }
        let km = KMeans::fit(&points, 2, 5, 1).unwrap();
        assert!(km.inertia < 0.1);
        assert_ne!(km.assign(&[0.0, 0.0]), km.assign(&[5.0, 5.0]));
    }

    #[test]
    fn k_is_capped_and_deterministic() {
        let points = vec![vec![1.0], vec![2.0], vec![2.0]];
        let a = KMeans::fit(&points, 10, 3, 7).unwrap();
        assert_eq!(a.centroids.len(), 3);
        assert_eq!(a, KMeans::fit(&points, 10, 3, 7).unwrap());
        assert!(KMeans::fit(&[], 2, 1, 0).is_err());
    }
}
