//! Seeded k-means++ with Lloyd refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{squared_distance, Scalar};

pub const MAX_ITERATIONS: usize = 50;

/// How many clusters to request for a set of `n` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCount {
    Fixed(usize),
    /// `⌈f · n⌉` clusters.
    PerNode(f64),
}

impl ClusterCount {
    /// Requested count clamped to `[1, n]` (0 when `n == 0`).
    pub fn resolve(self, n: usize) -> usize {
        let k = match self {
            Self::Fixed(k) => k,
            Self::PerNode(f) => (f * n as f64).ceil() as usize,
        };
        k.clamp(1, n.max(1)).min(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<T> {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia: Vec<T>,
}

impl<T: Scalar> KMeans<T> {
    pub fn final_inertia(&self) -> T {
        self.inertia.last().copied().unwrap_or_else(T::zero)
    }
}

pub fn inertia<T: Scalar>(x: &[Vec<T>], centroids: &[Vec<T>], assignments: &[usize]) -> T {
    x.iter().zip(assignments).fold(T::zero(), |acc, (p, &a)| acc + squared_distance(p, &centroids[a]))
}

/// Clusters `x` into `min(k, |x|)` groups. Empty clusters keep their centroid;
/// a point moves only when another centroid is strictly closer.
pub fn kmeans<T: Scalar>(x: &[Vec<T>], k: usize, seed: u64) -> KMeans<T> {
    let n = x.len();
    let k = k.clamp(1, n.max(1)).min(n);
    if n == 0 {
        return KMeans { assignments: Vec::new(), centroids: Vec::new(), inertia: Vec::new() };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(x, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = vec![false; k];
        let mut any = false;
        for (i, p) in x.iter().enumerate() {
            let old = assignments[i];
            let mut best = if old == usize::MAX { 0 } else { old };
            let mut best_d = squared_distance(p, &centroids[best]);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if best != old {
                any = true;
                if old != usize::MAX {
                    changed[old] = true;
                }
                changed[best] = true;
                assignments[i] = best;
            }
        }
        if !any {
            break;
        }
        // untouched clusters keep their previous centroid bit-for-bit
        for c in (0..k).filter(|&c| changed[c]) {
            let members: Vec<&Vec<T>> = x.iter().zip(&assignments).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let count = T::lit(members.len() as f64);
            let mut mean = vec![T::zero(); x[0].len()];
            for p in members {
                for (m, &v) in mean.iter_mut().zip(p) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            centroids[c] = mean;
        }
        history.push(inertia(x, &centroids, &assignments));
    }
    if history.is_empty() {
        history.push(inertia(x, &centroids, &assignments));
    }
    KMeans { assignments, centroids, inertia: history }
}

fn plus_plus<T: Scalar>(x: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = x.len();
    let mut centroids = vec![x[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| squared_distance(p, &centroids[0]).real()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding landing on a zero-weight tail
            while d2[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = x[idx].clone();
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min(squared_distance(p, &c).real());
        }
        centroids.push(c);
    }
    centroids
}
