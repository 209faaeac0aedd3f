use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, BoxRegion, RPN_DELTA_WEIGHTS, ROI_DELTA_WEIGHTS};
use crate::synthdata::{Annotation, BinaryMask};

use super::anchors::LevelAnchors;
use super::model::DetectorConfig;
use super::roi_align::RoiRequest;

/// Ground truth of one training image. `classes` index the training
/// vocabulary: 0 is background, `k` is the k-th base category.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTarget {
    pub boxes: Vec<BoxRegion>,
    pub classes: Vec<usize>,
    pub masks: Vec<BinaryMask>,
}

impl TrainTarget {
    /// Maps dataset category ids to positions in `base_ids` (plus one).
    /// Any category outside `base_ids` is an error: novel categories must
    /// never reach a training loss.
    pub fn from_annotations(annotations: &[Annotation], base_ids: &[usize]) -> Result<Self> {
        let mut t = Self {
            boxes: Vec::new(),
            classes: Vec::new(),
            masks: Vec::new(),
        };
        for a in annotations {
            let k = base_ids.iter().position(|&b| b == a.category_id).ok_or_else(|| {
                Error::Invalid(format!(
                    "category {} is not a base category; restrict the training set to base categories",
                    a.category_id
                ))
            })?;
            t.boxes.push(a.bbox);
            t.classes.push(k + 1);
            t.masks.push(a.mask.clone());
        }
        Ok(t)
    }

    pub fn hflip(&self, width: usize) -> Self {
        Self {
            boxes: self.boxes.iter().map(|b| b.hflip(width)).collect(),
            classes: self.classes.clone(),
            masks: self.masks.iter().map(|m| m.hflip()).collect(),
        }
    }
}

/// Per-level RPN targets over a batch, laid out like the RPN outputs
/// (`[B, H, W, A]` and `[B, H, W, 4A]`).
#[derive(Clone, Debug, Default)]
pub struct RpnTargets {
    pub labels: Vec<Vec<f32>>,
    pub label_weights: Vec<Vec<f32>>,
    pub deltas: Vec<Vec<f32>>,
    pub delta_weights: Vec<Vec<f32>>,
    /// Sampled anchors over the batch (the loss normalizer).
    pub sampled: usize,
}

fn sample<R: Rng>(mut idx: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    if idx.len() > n {
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

/// Positive: IoU >= fg threshold, or the best anchor of some ground-truth
/// box (ties included). Negative: max IoU < bg threshold. Between: ignored.
/// Samples `rpn_batch` anchors per image, at most `rpn_positive_fraction`
/// of them positive.
pub fn rpn_targets<R: Rng>(
    anchors: &[LevelAnchors],
    targets: &[TrainTarget],
    config: &DetectorConfig,
    rng: &mut R,
) -> RpnTargets {
    let b = targets.len();
    let sizes: Vec<usize> = anchors.iter().map(|a| a.len()).collect();
    let mut out = RpnTargets {
        labels: sizes.iter().map(|&n| vec![0.0; b * n]).collect(),
        label_weights: sizes.iter().map(|&n| vec![0.0; b * n]).collect(),
        deltas: sizes.iter().map(|&n| vec![0.0; 4 * b * n]).collect(),
        delta_weights: sizes.iter().map(|&n| vec![0.0; 4 * b * n]).collect(),
        sampled: 0,
    };
    let all: Vec<(usize, usize, &BoxRegion, bool)> = anchors
        .iter()
        .enumerate()
        .flat_map(|(l, la)| la.boxes.iter().zip(&la.inside).enumerate().map(move |(i, (bx, &ins))| (l, i, bx, ins)))
        .collect();
    for (bi, t) in targets.iter().enumerate() {
        let g = t.boxes.len();
        let mut best = vec![(-1.0f32, usize::MAX); all.len()];
        let mut gt_best = vec![0.0f32; g];
        let ious: Vec<Vec<f32>> = all
            .iter()
            .map(|(_, _, a, ins)| if *ins { t.boxes.iter().map(|gb| a.iou(gb)).collect() } else { vec![0.0; g] })
            .collect();
        for (ai, row) in ious.iter().enumerate() {
            if !all[ai].3 {
                continue;
            }
            for (gi, &v) in row.iter().enumerate() {
                if v > best[ai].0 {
                    best[ai] = (v, gi);
                }
                gt_best[gi] = gt_best[gi].max(v);
            }
            if g == 0 {
                best[ai] = (0.0, usize::MAX);
            }
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (ai, row) in ious.iter().enumerate() {
            if !all[ai].3 {
                continue;
            }
            let is_best = row.iter().zip(&gt_best).enumerate().find(|(_, (&v, &m))| m > 0.0 && v == m);
            if let Some((gi, _)) = is_best {
                pos.push(ai);
                best[ai].1 = if best[ai].0 >= config.rpn_fg_iou { best[ai].1 } else { gi };
            } else if best[ai].0 >= config.rpn_fg_iou {
                pos.push(ai);
            } else if best[ai].0 < config.rpn_bg_iou {
                neg.push(ai);
            }
        }
        let max_pos = (config.rpn_batch as f64 * config.rpn_positive_fraction) as usize;
        let pos = sample(pos, max_pos, rng);
        let neg = sample(neg, config.rpn_batch - pos.len(), rng);
        out.sampled += pos.len() + neg.len();
        for (&ai, positive) in pos.iter().map(|a| (a, true)).chain(neg.iter().map(|a| (a, false))) {
            let (l, i, anchor, _) = all[ai];
            let k = bi * sizes[l] + i;
            out.label_weights[l][k] = 1.0;
            if positive {
                out.labels[l][k] = 1.0;
                let d = encode_deltas(anchor, &t.boxes[best[ai].1], RPN_DELTA_WEIGHTS);
                out.deltas[l][4 * k..4 * k + 4].copy_from_slice(&d);
                out.delta_weights[l][4 * k..4 * k + 4].fill(1.0);
            }
        }
    }
    out
}

/// Sampled second-stage regions over a batch.
#[derive(Clone, Debug, Default)]
pub struct RoiTargets {
    pub rois: Vec<RoiRequest>,
    /// Training-vocabulary index per ROI, 0 for background.
    pub classes: Vec<usize>,
    /// `[R, 4]` with weights 1 on foreground rows only.
    pub box_targets: Vec<f32>,
    pub box_weights: Vec<f32>,
    pub mask_rois: Vec<RoiRequest>,
    /// `[M, S, S]` binary targets, S = mask output side.
    pub mask_targets: Vec<f32>,
}

impl RoiTargets {
    pub fn num_foreground(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }
}

/// The ground-truth mask sampled at the `side x side` cell centres of `roi`.
pub fn mask_target(mask: &BinaryMask, roi: &BoxRegion, side: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let py = roi.y0 + (y as f32 + 0.5) * roi.height() / side as f32;
        for x in 0..side {
            let px = roi.x0 + (x as f32 + 0.5) * roi.width() / side as f32;
            let inside = px >= 0.0 && py >= 0.0 && (px as usize) < mask.width && (py as usize) < mask.height;
            out.push(if inside && mask.get(px as usize, py as usize) { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Proposals plus ground-truth boxes, labelled foreground at IoU >=
/// `roi_fg_iou` and background otherwise, then sampled to `roi_batch` per
/// image with at most `roi_positive_fraction` foreground.
pub fn roi_targets<R: Rng>(
    proposals: &[Vec<BoxRegion>],
    targets: &[TrainTarget],
    config: &DetectorConfig,
    rng: &mut R,
) -> RoiTargets {
    let mut out = RoiTargets::default();
    let side = 2 * config.mask_roi_size;
    for (bi, (props, t)) in proposals.iter().zip(targets).enumerate() {
        let cand: Vec<BoxRegion> = props.iter().chain(&t.boxes).copied().filter(|b| b.is_valid()).collect();
        let matched: Vec<(f32, usize)> = cand
            .iter()
            .map(|c| {
                t.boxes
                    .iter()
                    .enumerate()
                    .map(|(gi, gb)| (c.iou(gb), gi))
                    .fold((0.0, usize::MAX), |acc, x| if x.0 > acc.0 { x } else { acc })
            })
            .collect();
        let fg: Vec<usize> = (0..cand.len()).filter(|&i| matched[i].1 != usize::MAX && matched[i].0 >= config.roi_fg_iou).collect();
        let bg: Vec<usize> = (0..cand.len()).filter(|&i| !(matched[i].1 != usize::MAX && matched[i].0 >= config.roi_fg_iou)).collect();
        let max_fg = (config.roi_batch as f64 * config.roi_positive_fraction) as usize;
        let mut fg = fg;
        fg.shuffle(rng);
        fg.truncate(max_fg);
        let bg = sample(bg, config.roi_batch - fg.len(), rng);
        for (n, &i) in fg.iter().enumerate() {
            let gi = matched[i].1;
            out.rois.push(RoiRequest { batch_index: bi, bbox: cand[i] });
            out.classes.push(t.classes[gi]);
            out.box_targets.extend(encode_deltas(&cand[i], &t.boxes[gi], ROI_DELTA_WEIGHTS));
            out.box_weights.extend([1.0; 4]);
            if n < config.mask_positives {
                out.mask_rois.push(RoiRequest { batch_index: bi, bbox: cand[i] });
                out.mask_targets.extend(mask_target(&t.masks[gi], &cand[i], side));
            }
        }
        for &i in &bg {
            out.rois.push(RoiRequest { batch_index: bi, bbox: cand[i] });
            out.classes.push(0);
            out.box_targets.extend([0.0; 4]);
            out.box_weights.extend([0.0; 4]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use crate::detector::anchors::level_anchors;

    fn target(boxes: &[BoxRegion]) -> TrainTarget {
        TrainTarget {
            boxes: boxes.to_vec(),
            classes: vec![1; boxes.len()],
            masks: boxes
                .iter()
                .map(|b| {
                    let mut m = BinaryMask::new(64, 64);
                    for y in b.y0 as usize..b.y1 as usize {
                        for x in b.x0 as usize..b.x1 as usize {
                            m.set(x, y, true);
                        }
                    }
                    m
                })
                .collect(),
        }
    }

    #[test]
    fn novel_categories_are_rejected() {
        let ann = Annotation {
            bbox: BoxRegion::new(0.0, 0.0, 4.0, 4.0),
            mask: BinaryMask::new(8, 8),
            category_id: 7,
        };
        assert!(TrainTarget::from_annotations(&[ann.clone()], &[1, 2, 3]).is_err());
        let t = TrainTarget::from_annotations(&[ann], &[2, 7]).unwrap();
        assert_eq!(t.classes, vec![2]);
    }

    #[test]
    fn rpn_matching_rules() {
        let cfg = DetectorConfig::default();
        let anchors = vec![level_anchors(8, (8, 8), 16.0, &[1.0], (64, 64))];
        // Exactly the anchor of cell (1, 1): IoU 1.
        let gt = BoxRegion::new(4.0, 4.0, 20.0, 20.0);
        let t = rpn_targets(&anchors, &[target(&[gt])], &cfg, &mut rng(1));
        let k = 8 + 1;
        assert_eq!(t.labels[0][k], 1.0);
        assert_eq!(t.label_weights[0][k], 1.0);
        assert!(t.deltas[0][4 * k..4 * k + 4].iter().all(|d| d.abs() < 1e-6));
        assert_eq!(t.labels[0].iter().sum::<f32>(), 1.0);
        // Every anchor is sampled (64 < 256): 1 positive, the rest negative
        // unless they fall in the ignore band.
        let ignored = (0..64).filter(|&i| t.label_weights[0][i] == 0.0).count();
        assert_eq!(t.sampled + ignored, 64);

        // A tiny object still gets its best anchor as a positive.
        let small = BoxRegion::new(30.0, 30.0, 36.0, 36.0);
        let t = rpn_targets(&anchors, &[target(&[small])], &cfg, &mut rng(1));
        assert!(t.labels[0].iter().sum::<f32>() >= 1.0);

        // Empty image: all negatives, capped at the batch size.
        let cfg_small = DetectorConfig { rpn_batch: 10, ..cfg };
        let t = rpn_targets(&anchors, &[target(&[])], &cfg_small, &mut rng(1));
        assert_eq!(t.sampled, 10);
        assert_eq!(t.labels[0].iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn roi_sampling_fractions_and_masks() {
        let cfg = DetectorConfig {
            roi_batch: 8,
            mask_positives: 1,
            ..Default::default()
        };
        let gt = BoxRegion::new(10.0, 10.0, 30.0, 30.0);
        let props: Vec<BoxRegion> = (0..20)
            .map(|i| {
                let o = i as f32;
                BoxRegion::new(10.0 + o, 10.0, 30.0 + o, 30.0)
            })
            .collect();
        let r = roi_targets(&[props], &[target(&[gt])], &cfg, &mut rng(2));
        assert_eq!(r.rois.len(), 8);
        assert_eq!(r.num_foreground(), 2);
        assert_eq!(r.mask_rois.len(), 1);
        assert_eq!(r.mask_targets.len(), 28 * 28);
        for (i, c) in r.classes.iter().enumerate() {
            let fg = *c != 0;
            assert_eq!(r.box_weights[4 * i] == 1.0, fg);
            assert_eq!(r.rois[i].bbox.iou(&gt) >= 0.5, fg);
        }
        // The ground-truth box itself as ROI gives an all-ones mask target.
        assert!(mask_target(&target(&[gt]).masks[0], &gt, 28).iter().all(|&v| v == 1.0));
    }
}
