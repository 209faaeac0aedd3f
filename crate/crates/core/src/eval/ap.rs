use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::BoxRegion;
use crate::synthdata::{DetectionDataset, VocabularySplit};

/// COCO IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

/// Greedy matching for one category in one image. `detections` must be
/// sorted by score descending; each one takes the still-unmatched ground
/// truth of highest IoU at or above `iou_threshold` (ties to the lower
/// index). Returns true-positive flags.
pub fn match_and_score(detections: &[BoxRegion], ground_truth: &[BoxRegion], iou_threshold: f32) -> Vec<bool> {
    let mut taken = vec![false; ground_truth.len()];
    detections
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f32)> = None;
            for (g, gt) in ground_truth.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = d.iou(gt);
                if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP. Detections are ranked by score descending
/// (stable for ties). `None` when there is no ground truth.
pub fn average_precision(labels: &[bool], scores: &[f64], n_gt: usize) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "one score per label");
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        tp += usize::from(labels[i]);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    Some(sum / 101.0)
}

/// One scored box of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoxRegion,
    pub category_id: usize,
    pub score: f64,
}

/// Box AP summary of one set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Per category (index `id - 1`): AP averaged over IoU 0.50:0.95, `None`
    /// when the category has no ground truth.
    pub per_category: Vec<Option<f64>>,
    pub per_category_ap50: Vec<Option<f64>>,
    pub ap_novel: f64,
    pub ap_base: f64,
    pub ap_all: f64,
    pub ap50: f64,
    pub ap75: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-category AP at one IoU threshold over the whole dataset. Detections
/// are pooled across images by score, ties broken by image id and then by
/// rank within the image.
fn category_ap(
    dataset: &DetectionDataset,
    predictions: &BTreeMap<usize, Vec<ScoredBox>>,
    category: usize,
    iou_threshold: f32,
) -> Option<f64> {
    let mut n_gt = 0;
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    for s in &dataset.samples {
        let gt: Vec<BoxRegion> = s
            .annotations
            .iter()
            .filter(|a| a.category_id == category)
            .map(|a| a.bbox)
            .collect();
        n_gt += gt.len();
        let mut dets: Vec<ScoredBox> = predictions
            .get(&s.id)
            .map(|d| d.iter().filter(|d| d.category_id == category).copied().collect())
            .unwrap_or_default();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let boxes: Vec<BoxRegion> = dets.iter().map(|d| d.bbox).collect();
        for (rank, (d, tp)) in dets.iter().zip(match_and_score(&boxes, &gt, iou_threshold)).enumerate() {
            pooled.push((d.score, s.id, rank, tp));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let labels: Vec<bool> = pooled.iter().map(|p| p.3).collect();
    let scores: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    average_precision(&labels, &scores, n_gt)
}

/// COCO-style box AP of `predictions` (keyed by image id) against the
/// dataset's ground truth, split into base and novel categories.
pub fn box_ap(dataset: &DetectionDataset, split: &VocabularySplit, predictions: &BTreeMap<usize, Vec<ScoredBox>>) -> ApSummary {
    let n = split.num_categories();
    let thresholds = iou_thresholds();
    let mut per_category = Vec::with_capacity(n);
    let mut per_category_ap50 = Vec::with_capacity(n);
    let mut per_category_ap75 = Vec::with_capacity(n);
    for c in 1..=n {
        let aps: Vec<Option<f64>> = thresholds.iter().map(|&t| category_ap(dataset, predictions, c, t)).collect();
        per_category.push(aps[0].map(|_| mean_of(aps.iter().map(|a| a.unwrap()))));
        per_category_ap50.push(aps[0]);
        per_category_ap75.push(aps[5]);
    }
    let subset = |ids: &BTreeSet<usize>, v: &[Option<f64>]| mean_of(ids.iter().filter_map(|&i| v[i - 1]));
    let all: BTreeSet<usize> = (1..=n).collect();
    ApSummary {
        ap_novel: subset(&split.novel_ids, &per_category),
        ap_base: subset(&split.base_ids, &per_category),
        ap_all: subset(&all, &per_category),
        ap50: subset(&all, &per_category_ap50),
        ap75: subset(&all, &per_category_ap75),
        per_category,
        per_category_ap50,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_traced_cases() {
        assert_eq!(average_precision(&[false, true], &[0.9, 0.5], 1), Some(0.5));
        assert_eq!(average_precision(&[true, true], &[0.9, 0.5], 2), Some(1.0));
        assert_eq!(average_precision(&[], &[], 3), Some(0.0));
        assert_eq!(average_precision(&[false], &[0.3], 2), Some(0.0));
        assert_eq!(average_precision(&[true], &[0.3], 0), None);
    }

    #[test]
    fn matching_rules() {
        let g = BoxRegion::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(match_and_score(&[g], &[g], 0.5), vec![true]);
        let near = BoxRegion::new(0.0, 0.0, 10.0, 9.0);
        assert_eq!(match_and_score(&[g, near], &[g], 0.5), vec![true, false]);
        assert_eq!(match_and_score(&[g], &[], 0.5), vec![false]);
    }

    /// Independent AP: for each recall level r, the best precision over all
    /// cut-offs whose recall reaches r.
    fn brute_force_ap(labels: &[bool], scores: &[f64], n_gt: usize) -> f64 {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut total = 0.0;
        for r in 0..=100 {
            let mut best = 0.0f64;
            for cut in 1..=idx.len() {
                let tp = idx[..cut].iter().filter(|&&i| labels[i]).count();
                let rec = tp as f64 / n_gt as f64;
                if rec >= r as f64 / 100.0 {
                    best = best.max(tp as f64 / cut as f64);
                }
            }
            total += best;
        }
        total / 101.0
    }

    fn boxes() -> impl Strategy<Value = BoxRegion> {
        (0u8..4, 0u8..4, 1u8..4, 1u8..4).prop_map(|(x, y, w, h)| {
            BoxRegion::new(x as f32 * 4.0, y as f32 * 4.0, (x + w) as f32 * 4.0, (y + h) as f32 * 4.0)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_the_brute_force_oracle(
            dets in proptest::collection::vec((boxes(), 0u8..10), 0..=6),
            gts in proptest::collection::vec(boxes(), 1..=3),
        ) {
            let mut dets = dets;
            dets.sort_by(|a, b| b.1.cmp(&a.1));
            let db: Vec<BoxRegion> = dets.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = dets.iter().map(|d| d.1 as f64 / 10.0).collect();
            let labels = match_and_score(&db, &gts, 0.5);
            prop_assert_eq!(labels.iter().filter(|&&t| t).count() <= gts.len(), true);
            let ap = average_precision(&labels, &scores, gts.len()).unwrap();
            let oracle = brute_force_ap(&labels, &scores, gts.len());
            prop_assert!((ap - oracle).abs() < 1e-12, "{} vs {}", ap, oracle);
        }

        #[test]
        fn trailing_duplicate_tp_never_lowers_ap(
            labels in proptest::collection::vec(any::<bool>(), 0..8), n_extra in 1usize..3,
        ) {
            let tp = labels.iter().filter(|&&t| t).count();
            let n_gt = tp + n_extra;
            let scores: Vec<f64> = (0..labels.len()).map(|i| 1.0 - i as f64 * 0.1).collect();
            let before = average_precision(&labels, &scores, n_gt).unwrap();
            let mut l2 = labels.clone();
            l2.push(true);
            let mut s2 = scores.clone();
            s2.push(-1.0);
            prop_assert!(average_precision(&l2, &s2, n_gt).unwrap() >= before - 1e-12);
        }
    }
}
