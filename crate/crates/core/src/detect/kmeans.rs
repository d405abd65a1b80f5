//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng as _;

use crate::corpus::sq_dist;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    /// Point index -> cluster index.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub objective: f64,
    /// Objective after every assignment step, first to last.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansModel> {
    if points.is_empty() {
        return Err(Error::Empty("k-means input"));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs K >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::TooFew {
            requested: k,
            available: points.len(),
        });
    }
    let mut rng = rng::seeded(seed);
    let init = kmeans_pp_init(points, k, &mut rng);
    Ok(lloyd(points, init, MAX_ITER))
}

/// k-means++ seeding: the first center is uniform, later ones are drawn with
/// probability proportional to squared distance from the nearest chosen center.
pub fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` a hair below `target`
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Runs Lloyd iterations from `init` until the assignment stops changing or
/// `max_iter` updates have been made. Empty clusters keep their centroid.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iter: usize) -> KMeansModel {
    let mut centroids = init;
    let (mut assignments, mut objective) = assign(points, &centroids);
    let mut trace = vec![objective];
    let mut iterations = 0;
    while iterations < max_iter {
        centroids = update(points, &assignments, centroids);
        iterations += 1;
        let (next, obj) = assign(points, &centroids);
        trace.push(obj);
        objective = obj;
        let done = next == assignments;
        assignments = next;
        if done {
            break;
        }
    }
    KMeansModel {
        centroids,
        assignments,
        objective,
        objective_trace: trace,
        iterations,
    }
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut objective = 0.0;
    let assignments = points
        .iter()
        .map(|p| {
            let (best, d) = nearest(p, centroids);
            objective += d;
            best
        })
        .collect();
    (assignments, objective)
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
pub(crate) fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    (best, best_d)
}

fn update(points: &[Vec<f64>], assignments: &[usize], mut centroids: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            centroids[j] = sums[j].iter().map(|s| s / n).collect();
        }
    }
    centroids
}
