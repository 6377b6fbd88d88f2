use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment step")
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centroid uniform, each next one drawn with
/// probability proportional to squared distance from the nearest chosen one.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("positive total");
            }
            pick
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd iterations from k-means++ seeds. Distance ties go to the lower
/// cluster index; an emptied cluster keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::Usage(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("k-means points differ in dimension"));
    }
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, dist2(p, cen)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            inertia += dist;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((cen, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *cen = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        inertia_history: history,
        converged,
    })
}
