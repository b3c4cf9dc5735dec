use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_dims, default_format, sq_dist, Versioned};
use crate::error::{Error, Result};
use crate::util::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 5,
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    #[serde(default = "default_format")]
    pub format: u32,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Seed of the restart that produced this model.
    pub seed: u64,
}

impl Versioned for ClusterModel {
    fn format(&self) -> u32 {
        self.format
    }
}

impl ClusterModel {
    /// Index of the nearest centroid (lowest index on ties).
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Inertia of each restart, in restart order.
    pub restart_inertias: Vec<f64>,
    /// Inertia after each assignment step of the winning restart.
    pub trace: Vec<f64>,
}

#[inline]
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

struct Restart {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
    trace: Vec<f64>,
    seed: u64,
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (j, d) = nearest(centroids, p);
        *l = j;
        inertia += d;
    }
    inertia
}

fn lloyd(points: &[Vec<f64>], params: &KMeansParams, seed: u64) -> Restart {
    let (n, d, k) = (points.len(), points[0].len(), params.k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut trace: Vec<f64> = Vec::new();
    let mut iter = 0;
    loop {
        let inertia = assign_all(points, &centroids, &mut labels);
        if let Some(&prev) = trace.last() {
            debug_assert!(
                inertia <= prev + 1e-9 * prev.abs().max(1.0),
                "k-means inertia increased: {prev} -> {inertia}"
            );
        }
        let improvement = trace.last().map(|&p: &f64| p - inertia);
        trace.push(inertia);

        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let has_empty = counts.contains(&0);
        let converged = improvement.is_some_and(|imp| imp < params.tol) && !has_empty;
        if converged || iter >= params.max_iters {
            break;
        }
        iter += 1;

        let mut sums = vec![vec![0.0; d]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s * inv).collect();
            }
        }
        if has_empty {
            // Re-seed each empty cluster at the point farthest from its
            // centroid, taken from clusters that can spare a member.
            let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
            for j in empty {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .map(|i| (i, sq_dist(&points[i], &centroids[labels[i]])))
                    .fold(None::<(usize, f64)>, |best, (i, dist)| match best {
                        Some((_, bd)) if bd >= dist => best,
                        _ => Some((i, dist)),
                    });
                if let Some((i, _)) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = j;
                    counts[j] = 1;
                    centroids[j] = points[i].clone();
                }
            }
        }
    }
    let inertia = *trace.last().expect("at least one assignment");
    Restart {
        centroids,
        assignments: labels,
        inertia,
        trace,
        seed,
    }
}

/// Lloyd's algorithm with k-means++ seeding, repeated `restarts` times with
/// seeds derived from `params.seed`; the lowest-inertia restart wins (the
/// earliest one on ties).
pub fn kmeans(points: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansFit> {
    if params.k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if points.len() < params.k {
        return Err(Error::InvalidInput(format!(
            "k = {} exceeds point count {}",
            params.k,
            points.len()
        )));
    }
    if params.restarts == 0 {
        return Err(Error::InvalidInput("restarts must be >= 1".into()));
    }
    let d = check_dims(points)?;
    if d == 0 || points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("points must be non-empty and finite".into()));
    }
    let runs: Vec<Restart> = (0..params.restarts as u64)
        .into_par_iter()
        .map(|r| lloyd(points, params, child_seed(params.seed, r)))
        .collect();
    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("restarts >= 1");
    Ok(KMeansFit {
        model: ClusterModel {
            format: super::MODEL_FORMAT,
            k: params.k,
            centroids: best.centroids,
            inertia: best.inertia,
            seed: best.seed,
        },
        assignments: best.assignments,
        restart_inertias,
        trace: best.trace,
    })
}
