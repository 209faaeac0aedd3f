use crate::detector::{detection_scores, FeaturePyramid, Mode, TrainedDetector};
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, nms_sorted, BoxRegion, ROI_DELTA_WEIGHTS};
use crate::image::RgbImage;
use crate::synthdata::{BinaryMask, VocabularySplit};
use crate::tensor::Tensor;
use crate::vlm::{build_vocabulary_embeddings, VlmModel, VocabularyEmbedding};

use super::region::vlm_region_cosines;
use super::score::{softmax_t, FusionParams, Fuser};

/// One emitted detection. `score` is the fused s of `category_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxRegion,
    /// 1-based; background is never emitted.
    pub category_id: usize,
    pub score: f64,
    /// `[28, 28]` mask logits over `bbox`.
    pub mask: Option<Tensor<f32>>,
}

impl Detection {
    /// Paste the mask logits into an image-sized binary mask (logit > 0).
    pub fn binary_mask(&self, width: usize, height: usize) -> Option<BinaryMask> {
        let logits = self.mask.as_ref()?;
        Some(paste_mask(logits, &self.bbox, width, height))
    }
}

/// Nearest-cell paste of `[m, m]` logits covering `bbox`.
pub fn paste_mask(logits: &Tensor<f32>, bbox: &BoxRegion, width: usize, height: usize) -> BinaryMask {
    let m = logits.shape()[0];
    let mut out = BinaryMask::new(width, height);
    let (bw, bh) = (bbox.width().max(1e-6), bbox.height().max(1e-6));
    let x_lo = bbox.x0.floor().max(0.0) as usize;
    let y_lo = bbox.y0.floor().max(0.0) as usize;
    let x_hi = (bbox.x1.ceil() as usize).min(width);
    let y_hi = (bbox.y1.ceil() as usize).min(height);
    for y in y_lo..y_hi {
        let v = (y as f32 + 0.5 - bbox.y0) / bh;
        if !(0.0..1.0).contains(&v) {
            continue;
        }
        let cy = ((v * m as f32) as usize).min(m - 1);
        for x in x_lo..x_hi {
            let u = (x as f32 + 0.5 - bbox.x0) / bw;
            if !(0.0..1.0).contains(&u) {
                continue;
            }
            let cx = ((u * m as f32) as usize).min(m - 1);
            if logits.data()[cy * m + cx] > 0.0 {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Everything about one image that does not depend on the fusion
/// parameters, so alpha/beta/T/kind sweeps need no forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub image_width: usize,
    pub image_height: usize,
    /// Raw RPN proposals (where the VLM scores are taken).
    pub proposals: Vec<BoxRegion>,
    /// Class-agnostic refined and clipped boxes, one per proposal.
    pub refined: Vec<BoxRegion>,
    /// Vocabulary rows including background.
    pub num_rows: usize,
    /// Detector class probabilities z, `[P, num_rows]`.
    pub detector_probs: Vec<f32>,
    /// VLM cosine similarities, `[P, num_rows]`.
    pub vlm_cosines: Vec<f32>,
}

impl RawPrediction {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn detector_scores(&self, p: usize) -> Vec<f64> {
        let k = self.num_rows;
        self.detector_probs[p * k..(p + 1) * k].iter().map(|&x| x as f64).collect()
    }

    /// VLM scores w of proposal `p` at temperature `t`.
    pub fn vlm_scores(&self, p: usize, t: f64) -> Vec<f64> {
        let k = self.num_rows;
        let l: Vec<f64> = self.vlm_cosines[p * k..(p + 1) * k].iter().map(|&x| x as f64).collect();
        softmax_t(&l, t)
    }
}

/// A fused, NMS-surviving candidate before mask prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedBox {
    pub proposal: usize,
    pub bbox: BoxRegion,
    pub category_id: usize,
    pub score: f64,
}

fn check_vocab(vocab: &VocabularyEmbedding, split: &VocabularySplit) -> Result<()> {
    if vocab.names != split.all_categories {
        return Err(Error::Vocabulary(
            "vocabulary names do not match the split's category list".into(),
        ));
    }
    split.validate()
}

fn raw_from_pyramid(
    trained: &TrainedDetector,
    pyramid: &FeaturePyramid<f32>,
    top_grid: &crate::vlm::FeatureGrid<f32>,
    vocab: &VocabularyEmbedding,
) -> Result<RawPrediction> {
    let det = &trained.detector;
    let (w, h) = (pyramid.image_width, pyramid.image_height);
    let proposals: Vec<BoxRegion> = det.propose_regions(pyramid, Mode::Eval).iter().map(|p| p.bbox).collect();
    let emb = det.region_embed(pyramid, &proposals)?;
    let deltas = det.class_agnostic_box(&emb);
    let tau = det.tau() as f32;
    let mut detector_probs = Vec::with_capacity(proposals.len() * (vocab.num_categories() + 1));
    for i in 0..proposals.len() {
        detector_probs.extend(detection_scores(emb.row(i), vocab, tau)?);
    }
    let refined = proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = deltas.row(i);
            decode_deltas(p, [d[0], d[1], d[2], d[3]], ROI_DELTA_WEIGHTS).clip(w, h)
        })
        .collect();
    let vlm_cosines = vlm_region_cosines(&trained.vlm, top_grid, &proposals, vocab)?.concat();
    Ok(RawPrediction {
        image_width: w,
        image_height: h,
        proposals,
        refined,
        num_rows: vocab.num_categories() + 1,
        detector_probs,
        vlm_cosines,
    })
}

/// Fusion-independent predictions of one image over the full vocabulary.
pub fn predict_raw(trained: &TrainedDetector, image: &RgbImage, vocab: &VocabularyEmbedding) -> Result<RawPrediction> {
    let grids = trained.encode_image(image)?;
    let pyramid = trained.detector.build_fpn(&grids)?;
    raw_from_pyramid(trained, &pyramid, &grids[2], vocab)
}

/// Fuse every proposal's scores, run per-class NMS on the refined boxes
/// and keep the best `max_detections` (score desc, then category, then
/// proposal index).
pub fn rank_detections(raw: &RawPrediction, fuser: &Fuser) -> Result<Vec<RankedBox>> {
    if raw.num_rows != fuser.num_categories() + 1 {
        return Err(Error::Vocabulary(format!(
            "raw predictions cover {} categories, fusion expects {}",
            raw.num_rows - 1,
            fuser.num_categories()
        )));
    }
    let p = fuser.params();
    let k = raw.num_rows;
    let mut fused = Vec::with_capacity(raw.len() * k);
    for i in 0..raw.len() {
        fused.extend(fuser.fuse(&raw.detector_scores(i), &raw.vlm_scores(i, p.temperature))?);
    }
    let valid: Vec<usize> = (0..raw.len())
        .filter(|&i| raw.refined[i].is_valid() && raw.refined[i].width() > 0.0 && raw.refined[i].height() > 0.0)
        .collect();
    let mut out = Vec::new();
    for c in 1..k {
        let mut order = valid.clone();
        order.sort_by(|&a, &b| fused[b * k + c].total_cmp(&fused[a * k + c]).then(a.cmp(&b)));
        for i in nms_sorted(&raw.refined, &order, p.nms) {
            out.push(RankedBox {
                proposal: i,
                bbox: raw.refined[i],
                category_id: c,
                score: fused[i * k + c],
            });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.category_id.cmp(&b.category_id))
            .then(a.proposal.cmp(&b.proposal))
    });
    out.truncate(p.max_detections);
    Ok(out)
}

/// Open-vocabulary detection of one image: proposals, detector scores z
/// over the full vocabulary, VLM scores w on the raw proposals, fusion,
/// class-agnostic refinement, per-class NMS and the detection cap, then
/// masks on the kept boxes.
pub fn detect(
    trained: &TrainedDetector,
    image: &RgbImage,
    vocab: &VocabularyEmbedding,
    split: &VocabularySplit,
    params: &FusionParams,
) -> Result<Vec<Detection>> {
    check_vocab(vocab, split)?;
    let fuser = Fuser::new(params, &split.base_ids, &split.novel_ids)?;
    let grids = trained.encode_image(image)?;
    let pyramid = trained.detector.build_fpn(&grids)?;
    let raw = raw_from_pyramid(trained, &pyramid, &grids[2], vocab)?;
    let ranked = rank_detections(&raw, &fuser)?;
    let masks = if params.masks && !ranked.is_empty() {
        let boxes: Vec<BoxRegion> = ranked.iter().map(|r| r.bbox).collect();
        let t = trained.detector.class_agnostic_mask(&pyramid, &boxes)?;
        let m = t.shape()[1];
        let data = t.into_data();
        Some(
            data.chunks(m * m)
                .map(|c| Tensor::new(&[m, m], c.to_vec()))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, r)| Detection {
            bbox: r.bbox,
            category_id: r.category_id,
            score: r.score,
            mask: masks.as_ref().map(|m| m[i].clone()),
        })
        .collect())
}

/// Vocabulary embeddings for a new category list, with the transfer split
/// that treats every category as novel (only beta applies).
pub fn swap_vocabulary(
    vlm: &VlmModel<f32>,
    names: &[String],
    templates: &[&str],
) -> Result<(VocabularyEmbedding, VocabularySplit)> {
    let vocab = build_vocabulary_embeddings(vlm, names, templates)?;
    Ok((vocab, VocabularySplit::all_novel(names.to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn raw(n: usize, k: usize) -> RawPrediction {
        let mut r = RawPrediction {
            image_width: 200,
            image_height: 200,
            proposals: Vec::new(),
            refined: Vec::new(),
            num_rows: k + 1,
            detector_probs: Vec::new(),
            vlm_cosines: Vec::new(),
        };
        for i in 0..n {
            let x = (i % 20) as f32 * 9.0;
            let y = (i / 20) as f32 * 9.0;
            let b = BoxRegion::new(x, y, x + 8.0, y + 8.0);
            r.proposals.push(b);
            r.refined.push(b);
            let mut z: Vec<f32> = (0..=k).map(|c| 1.0 + ((i * 7 + c * 3) % 11) as f32).collect();
            let s: f32 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= s);
            r.detector_probs.extend(z);
            r.vlm_cosines.extend((0..=k).map(|c| ((i + c) % 5) as f32 * 0.1));
        }
        r
    }

    fn fuser(k: usize) -> Fuser {
        let base: BTreeSet<usize> = (1..=k).filter(|c| c % 3 != 0).collect();
        let novel: BTreeSet<usize> = (1..=k).filter(|c| c % 3 == 0).collect();
        Fuser::new(&FusionParams::default(), &base, &novel).unwrap()
    }

    #[test]
    fn cap_and_ordering() {
        // 200 disjoint boxes x 3 categories survive NMS: 600 candidates.
        let r = raw(200, 3);
        let out = rank_detections(&r, &fuser(3)).unwrap();
        assert_eq!(out.len(), 300);
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(out.iter().all(|d| d.category_id >= 1 && (0.0..=1.0).contains(&d.score)));
    }

    #[test]
    fn identical_refined_boxes_keep_one() {
        let mut r = raw(2, 1);
        r.refined[1] = r.refined[0];
        let out = rank_detections(&r, &fuser(1)).unwrap();
        assert_eq!(out.len(), 1);
        let s0 = fuser(1).fuse(&r.detector_scores(0), &r.vlm_scores(0, 0.01)).unwrap()[1];
        let s1 = fuser(1).fuse(&r.detector_scores(1), &r.vlm_scores(1, 0.01)).unwrap()[1];
        assert_eq!(out[0].score, s0.max(s1));
    }

    #[test]
    fn vocabulary_size_mismatch_rejected() {
        assert!(rank_detections(&raw(3, 2), &fuser(3)).is_err());
    }

    #[test]
    fn paste_fills_the_box() {
        let logits = Tensor::full(&[28, 28], 1.0f32);
        let m = paste_mask(&logits, &BoxRegion::new(2.0, 3.0, 10.0, 7.0), 16, 16);
        assert_eq!(m.area(), 32);
        assert_eq!(m.tight_box(), Some(BoxRegion::new(2.0, 3.0, 10.0, 7.0)));
    }
}
