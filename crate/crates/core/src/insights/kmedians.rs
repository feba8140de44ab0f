use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vecops::l1_dist;
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each input point, in input order.
    pub assignments: Vec<usize>,
    /// Total L1 distance to assigned centroids after initial assignment
    /// and after every update.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("history is never empty")
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median, the L1 centre of a set.
pub fn coordinate_median(points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    (0..dim)
        .map(|d| {
            let mut col: Vec<f64> = points.iter().map(|p| p[d]).collect();
            median(&mut col)
        })
        .collect()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = l1_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Seeding in the k-means++ style with L1 distances as weights.
fn initial_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| l1_dist(p, points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if weights[pick] == 0.0 {
                pick = weights.iter().rposition(|w| *w > 0.0).expect("positive total");
            }
            pick
        } else {
            (0..points.len())
                .find(|i| !chosen.contains(i))
                .expect("at least k points")
        };
        chosen.push(next);
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

/// K-medians: L1 assignment and coordinate-wise median updates.
///
/// Points are put in a canonical order before seeding, so the result does
/// not depend on input order beyond a relabelling of assignments.
pub fn cluster_edits(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if features.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} features cannot form {k} clusters",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension("features differ in length".into()));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&features[a], &features[b]).then(a.cmp(&b)));
    let points: Vec<&[f64]> = order.iter().map(|&i| features[i].as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = initial_centroids(&points, k, &mut rng);
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let (c, d) = nearest(p, centroids);
                total += d;
                c
            })
            .collect();
        (a, total)
    };
    let (mut assignments, inertia) = assign(&centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| *p)
                .collect();
            if !members.is_empty() {
                *centroid = coordinate_median(&members);
            }
        }
        let (next, inertia) = assign(&centroids);
        history.push(inertia);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let mut original_order = vec![0; features.len()];
    for (pos, &i) in order.iter().enumerate() {
        original_order[i] = assignments[pos];
    }
    Ok(Clustering {
        centroids,
        assignments: original_order,
        inertia_history: history,
        iterations,
    })
}
