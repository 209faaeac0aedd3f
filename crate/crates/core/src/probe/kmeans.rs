use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng;
use crate::vlm::FeatureGrid;

/// k-means result over the cells of one grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `[height * width]`, each in `0..k`.
    pub assignments: Vec<usize>,
    /// `[k][D]`
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub history: Vec<f64>,
    pub k: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (ties to the lower index) and its squared distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding, then Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A cluster left empty is re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let mut r = rng(seed);
    let mut centroids = vec![points[r.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.gen::<f64>() * total;
            let mut i = 0;
            while i + 1 < n && (u >= d2[i] || d2[i] == 0.0) {
                u -= d2[i];
                i += 1;
            }
            i
        } else {
            r.gen_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            inertia += d;
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assign) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if counts.contains(&0) {
            let mut far: Vec<f64> = points.iter().zip(&assign).map(|(p, &j)| dist2(p, &centroids[j])).collect();
            for j in 0..k {
                if counts[j] == 0 {
                    let i = (0..n).max_by(|&a, &b| far[a].total_cmp(&far[b]).then(b.cmp(&a))).unwrap();
                    centroids[j] = points[i].clone();
                    far[i] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Ok((assign, centroids, history))
}

/// Cluster the cells of `grid` (optionally L2-normalized first).
pub fn kmeans_cluster(grid: &FeatureGrid<f32>, k: usize, seed: u64, max_iters: usize, normalize: bool) -> Result<ClusterMap> {
    let c = grid.channels();
    let points: Vec<Vec<f64>> = grid
        .values
        .data()
        .chunks(c)
        .map(|v| {
            let mut p: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            if normalize {
                let n = p.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                p.iter_mut().for_each(|x| *x /= n);
            }
            p
        })
        .collect();
    let (assignments, centroids, history) = kmeans(&points, k, seed, max_iters)?;
    Ok(ClusterMap {
        height: grid.height(),
        width: grid.width(),
        assignments,
        centroids,
        inertia: *history.last().unwrap(),
        history,
        k,
    })
}
