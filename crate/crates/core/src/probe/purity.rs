use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::seed::rng;
use crate::synthdata::Annotation;

/// Instance label per grid cell (0 = background): the instance covering
/// the most pixels of the cell, ties to the earlier annotation.
pub fn instance_labels(annotations: &[Annotation], width: usize, height: usize, grid_w: usize, grid_h: usize) -> Vec<usize> {
    let (sx, sy) = (width / grid_w, height / grid_h);
    let mut counts = vec![vec![0usize; annotations.len()]; grid_w * grid_h];
    for (a, ann) in annotations.iter().enumerate() {
        for y in 0..grid_h * sy {
            for x in 0..grid_w * sx {
                if ann.mask.get(x, y) {
                    counts[(y / sy) * grid_w + x / sx][a] += 1;
                }
            }
        }
    }
    counts
        .iter()
        .map(|c| {
            let best = (0..c.len()).max_by(|&a, &b| c[a].cmp(&c[b]).then(b.cmp(&a)));
            match best {
                Some(a) if c[a] > 0 => a + 1,
                _ => 0,
            }
        })
        .collect()
}

/// Size-weighted mean over clusters of the fraction of cells carrying the
/// cluster's majority label.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assignments.len(), labels.len(), "one label per cell");
    if assignments.is_empty() {
        return 0.0;
    }
    let mut tally: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *tally.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = tally.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / assignments.len() as f64
}

/// Purity of the same cluster sizes with the assignments shuffled over the
/// cells, averaged over `trials`.
pub fn shuffled_purity(assignments: &[usize], labels: &[usize], trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut a = assignments.to_vec();
    let mut total = 0.0;
    for _ in 0..trials.max(1) {
        a.shuffle(&mut r);
        total += cluster_purity(&a, labels);
    }
    total / trials.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxRegion;
    use crate::synthdata::BinaryMask;
    use rand::Rng;

    #[test]
    fn purity_examples() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(cluster_purity(&labels, &labels), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
    }

    #[test]
    fn random_assignments_approach_one_over_l() {
        // L clusters of ~100 random cells over L equal labels: every
        // majority share sits a little above 1/L.
        let l = 4;
        let labels: Vec<usize> = (0..400).map(|i| i % l).collect();
        let mut r = rng(9);
        let mut total = 0.0;
        for _ in 0..1000 {
            let a: Vec<usize> = (0..400).map(|_| r.gen_range(0..l)).collect();
            total += cluster_purity(&a, &labels);
        }
        let mean = total / 1000.0;
        assert!((mean - 1.0 / l as f64).abs() < 0.05, "{mean}");
    }

    #[test]
    fn labels_follow_coverage() {
        let mut m = BinaryMask::new(8, 8);
        for y in 0..4 {
            for x in 0..3 {
                m.set(x, y, true);
            }
        }
        let ann = Annotation {
            bbox: BoxRegion::new(0.0, 0.0, 3.0, 4.0),
            mask: m,
            category_id: 1,
        };
        assert_eq!(instance_labels(&[ann], 8, 8, 2, 2), vec![1, 0, 0, 0]);
    }
}
