use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{argsort_desc, decode_deltas, nms_sorted, BoxRegion, RPN_DELTA_WEIGHTS};
use crate::nn::{Ctx, ParamStore};
use crate::seed::rng;
use crate::tensor::{Real, Tensor};
use crate::vlm::{FeatureGrid, VlmConfig};

use super::anchors::{level_anchors, LevelAnchors};
use super::fpn::Fpn;
use super::heads::{BoxHead, MaskHead, RpnHead};
use super::roi_align::{roi_align_plan, RoiRequest};

pub const MIN_TAU: f64 = 1e-2;
pub const MAX_TAU: f64 = 1e2;

/// Strides of the pyramid levels P3..P6.
pub const PYRAMID_STRIDES: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub fpn_channels: usize,
    /// Repeats N of the lateral and top-down connections.
    pub fpn_repeats: usize,
    /// Anchor side is `anchor_scale * stride` on every level.
    pub anchor_scale: f32,
    /// Height / width ratios.
    pub anchor_ratios: Vec<f32>,
    pub rpn_nms: f32,
    pub rpn_pre_nms_top_k: usize,
    pub rpn_train_top_k: usize,
    pub rpn_eval_top_k: usize,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_fg_iou: f32,
    pub rpn_bg_iou: f32,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f32,
    pub box_roi_size: usize,
    pub mask_roi_size: usize,
    pub head_hidden: usize,
    pub mask_hidden: usize,
    pub mask_positives: usize,
    pub init_tau: f64,
    /// Proposals narrower or shorter than this (pixels) are dropped.
    pub min_box_size: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            fpn_channels: 64,
            fpn_repeats: 1,
            anchor_scale: 2.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_nms: 0.7,
            rpn_pre_nms_top_k: 1000,
            rpn_train_top_k: 256,
            rpn_eval_top_k: 300,
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch: 64,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            box_roi_size: 7,
            mask_roi_size: 14,
            head_hidden: 256,
            mask_hidden: 32,
            mask_positives: 8,
            init_tau: 1.0,
            min_box_size: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector.{m}")));
        if self.fpn_repeats < 1 {
            return bad("fpn_repeats must be at least 1");
        }
        if self.fpn_channels == 0 || self.head_hidden == 0 || self.mask_hidden == 0 {
            return bad("widths must be positive");
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|&r| !(r > 0.0)) {
            return bad("anchor_ratios must be positive and nonempty");
        }
        if !(self.init_tau > 0.0) {
            return bad("init_tau must be positive");
        }
        if self.box_roi_size == 0 || self.mask_roi_size == 0 {
            return bad("ROI sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.rpn_positive_fraction) || !(0.0..=1.0).contains(&self.roi_positive_fraction) {
            return bad("positive fractions must lie in [0, 1]");
        }
        if self.rpn_bg_iou > self.rpn_fg_iou {
            return bad("rpn_bg_iou must not exceed rpn_fg_iou");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pyramid levels P3..P6 of one image, all `fpn_channels` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<R: Real = f32> {
    pub levels: Vec<FeatureGrid<R>>,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoxRegion,
    /// Sigmoid of the objectness logit.
    pub objectness: f32,
    /// Anchor index counted across levels in pyramid order.
    pub anchor_index: usize,
}

/// Pyramid level (3, 4 or 5) for ROI features of `b`: level 3 up to 64 px
/// (square root of area), one level up per doubling.
pub fn roi_level(b: &BoxRegion) -> usize {
    let s = b.area().max(1e-6).sqrt();
    let k = (4.0 + (s / 64.0).log2()).floor();
    (k.max(3.0) as usize).min(5)
}

/// Detector head parameters: FPN, RPN, box head with learnable tau and the
/// mask head. Holds no backbone or text-encoder parameters.
pub struct DetectorModel<R: Real = f32> {
    pub config: DetectorConfig,
    pub embed_dim: usize,
    pub in_channels: [usize; 3],
    pub store: ParamStore<R>,
    fpn: Fpn,
    rpn: RpnHead,
    box_head: BoxHead,
    mask_head: MaskHead,
}

impl<R: Real> Clone for DetectorModel<R> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed_dim: self.embed_dim,
            in_channels: self.in_channels,
            store: self.store.clone(),
            fpn: self.fpn.clone(),
            rpn: self.rpn,
            box_head: self.box_head,
            mask_head: self.mask_head,
        }
    }
}

/// Backbone widths at strides 8, 16 and 32.
pub fn backbone_channels(vlm: &VlmConfig) -> [usize; 3] {
    [vlm.widths[1], vlm.widths[2], vlm.embed_dim]
}

impl<R: Real> DetectorModel<R> {
    pub fn new(config: DetectorConfig, in_channels: [usize; 3], embed_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let c = config.fpn_channels;
        let fpn = Fpn::new(&mut s, &mut r, in_channels, c, config.fpn_repeats)?;
        let rpn = RpnHead::new(&mut s, &mut r, c, config.anchor_ratios.len());
        let box_head = BoxHead::new(&mut s, &mut r, c, config.box_roi_size, config.head_hidden, embed_dim, config.init_tau);
        let mask_head = MaskHead::new(&mut s, &mut r, c, config.mask_hidden);
        Ok(Self {
            config,
            embed_dim,
            in_channels,
            store: s,
            fpn,
            rpn,
            box_head,
            mask_head,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.box_head.log_tau).data()[0].to_f64_lossy().exp()
    }

    /// Keep tau inside `[MIN_TAU, MAX_TAU]`.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.store.value_mut(self.box_head.log_tau).data_mut()[0];
        *v = R::from_f64_lossy(v.to_f64_lossy().clamp(MIN_TAU.ln(), MAX_TAU.ln()));
    }

    pub fn log_tau_index(&self) -> usize {
        self.box_head.log_tau
    }

    /// Anchors of every level for an image of the given size.
    pub fn anchors(&self, image_width: usize, image_height: usize) -> Vec<LevelAnchors> {
        PYRAMID_STRIDES
            .iter()
            .map(|&st| {
                let grid = (image_height.div_ceil(st), image_width.div_ceil(st));
                level_anchors(st, grid, self.config.anchor_scale * st as f32, &self.config.anchor_ratios, (image_width, image_height))
            })
            .collect()
    }

    // Tape-level pieces, shared by training, inference and gradient checks.

    pub fn pyramid_vars<'a>(&self, ctx: &Ctx<'a, R>, feats: &[Var<'a, R>]) -> Result<[Var<'a, R>; 4]> {
        if feats.len() != 3 {
            return Err(Error::Shape(format!("expected 3 backbone grids, got {}", feats.len())));
        }
        for (l, f) in feats.iter().enumerate() {
            let s = f.shape();
            if s.len() != 4 || s[3] != self.in_channels[l] {
                return Err(Error::Shape(format!(
                    "backbone grid {l} has shape {s:?}, expected {} channels",
                    self.in_channels[l]
                )));
            }
        }
        Ok(self.fpn.forward(ctx, feats))
    }

    pub fn rpn_vars<'a>(&self, ctx: &Ctx<'a, R>, pyramid: &[Var<'a, R>]) -> Vec<(Var<'a, R>, Var<'a, R>)> {
        pyramid.iter().map(|p| self.rpn.forward(ctx, p)).collect()
    }

    /// ROI-Align of every request from its assigned level of a batched
    /// pyramid; returns `[R, out, out, C]` in request order.
    pub fn roi_feature_vars<'a>(&self, pyramid: &[Var<'a, R>], rois: &[RoiRequest], out: usize) -> Result<Var<'a, R>> {
        let c = self.config.fpn_channels;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rois.len());
        for level in 3..=5 {
            let idx: Vec<usize> = (0..rois.len()).filter(|&i| roi_level(&rois[i].bbox) == level).collect();
            if idx.is_empty() {
                continue;
            }
            let map = &pyramid[level - 3];
            let s = map.shape();
            let reqs: Vec<RoiRequest> = idx.iter().map(|&i| rois[i]).collect();
            let plan = roi_align_plan::<R>(&reqs, s[0], s[1], s[2], PYRAMID_STRIDES[level - 3], out)?;
            parts.push(map.resample(Arc::new(plan), &[idx.len(), out, out, c]));
            order.extend(idx);
        }
        if parts.is_empty() {
            return Err(Error::Invalid("no regions to pool".into()));
        }
        let stacked = if parts.len() == 1 { parts.pop().unwrap() } else { Var::concat(&parts, 0) };
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return Ok(stacked);
        }
        let mut inverse = vec![0; order.len()];
        for (pos, &o) in order.iter().enumerate() {
            inverse[o] = pos;
        }
        let flat = stacked.reshape(&[rois.len(), out * out * c]);
        Ok(flat.gather_rows(&inverse).reshape(&[rois.len(), out, out, c]))
    }

    pub fn embed_vars<'a>(&self, ctx: &Ctx<'a, R>, roi_features: &Var<'a, R>) -> Var<'a, R> {
        self.box_head.embed(ctx, roi_features)
    }

    pub fn delta_vars<'a>(&self, ctx: &Ctx<'a, R>, embedding: &Var<'a, R>) -> Var<'a, R> {
        self.box_head.deltas(ctx, embedding)
    }

    pub fn logit_vars<'a>(&self, ctx: &Ctx<'a, R>, embedding: &Var<'a, R>, vocab: &Var<'a, R>) -> Var<'a, R> {
        self.box_head.logits(ctx, embedding, vocab)
    }

    pub fn mask_vars<'a>(&self, ctx: &Ctx<'a, R>, roi_features: &Var<'a, R>) -> Var<'a, R> {
        self.mask_head.forward(ctx, roi_features)
    }

    // Single-image inference.

    /// The feature pyramid of one image's backbone grids (eval mode).
    pub fn build_fpn(&self, grids: &[FeatureGrid<R>]) -> Result<FeaturePyramid<R>> {
        if grids.len() != 3 {
            return Err(Error::Shape(format!("expected 3 backbone grids, got {}", grids.len())));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let feats: Vec<_> = grids
            .iter()
            .map(|g| {
                let mut shape = vec![1];
                shape.extend_from_slice(g.values.shape());
                tape.constant(g.values.clone().reshape(&shape))
            })
            .collect();
        let levels = self.pyramid_vars(&ctx, &feats)?;
        Ok(FeaturePyramid {
            levels: levels
                .iter()
                .zip(PYRAMID_STRIDES)
                .enumerate()
                .map(|(i, (v, stride))| {
                    let t = (*v.value()).clone();
                    let s = t.shape()[1..].to_vec();
                    FeatureGrid {
                        values: t.reshape(&s),
                        stride,
                        stage_id: i + 3,
                    }
                })
                .collect(),
            image_width: grids[0].width() * 8,
            image_height: grids[0].height() * 8,
        })
    }

    fn pyramid_constants<'a>(&self, tape: &'a Tape<R>, pyramid: &FeaturePyramid<R>) -> Vec<Var<'a, R>> {
        pyramid
            .levels
            .iter()
            .map(|g| {
                let mut shape = vec![1];
                shape.extend_from_slice(g.values.shape());
                tape.constant(g.values.clone().reshape(&shape))
            })
            .collect()
    }

    /// Class-agnostic region proposals, best first.
    pub fn propose_regions(&self, pyramid: &FeaturePyramid<R>, mode: Mode) -> Vec<Proposal> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let levels = self.pyramid_constants(&tape, pyramid);
        let outs = self.rpn_vars(&ctx, &levels);
        let anchors = self.anchors(pyramid.image_width, pyramid.image_height);
        let raw: Vec<(Vec<f32>, Vec<f32>)> = outs
            .iter()
            .map(|(o, d)| (o.value().to_f32_vec(), d.value().to_f32_vec()))
            .collect();
        let top_k = match mode {
            Mode::Train => self.config.rpn_train_top_k,
            Mode::Eval => self.config.rpn_eval_top_k,
        };
        select_proposals(&raw, &anchors, (pyramid.image_width, pyramid.image_height), &self.config, top_k)
    }

    /// Region embeddings r_b `[n, D]` of `boxes`.
    pub fn region_embed(&self, pyramid: &FeaturePyramid<R>, boxes: &[BoxRegion]) -> Result<Tensor<R>> {
        if boxes.is_empty() {
            return Ok(Tensor::zeros(&[0, self.embed_dim]));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let levels = self.pyramid_constants(&tape, pyramid);
        let rois: Vec<RoiRequest> = boxes.iter().map(|&bbox| RoiRequest { batch_index: 0, bbox }).collect();
        let f = self.roi_feature_vars(&levels, &rois, self.config.box_roi_size)?;
        Ok((*self.embed_vars(&ctx, &f).value()).clone())
    }

    /// Box deltas `[n, 4]` from region embeddings.
    pub fn class_agnostic_box(&self, embeddings: &Tensor<R>) -> Tensor<R> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        (*self.delta_vars(&ctx, &tape.constant(embeddings.clone())).value()).clone()
    }

    /// Mask logits `[n, 28, 28]` for `boxes`.
    pub fn class_agnostic_mask(&self, pyramid: &FeaturePyramid<R>, boxes: &[BoxRegion]) -> Result<Tensor<R>> {
        let m = 2 * self.config.mask_roi_size;
        if boxes.is_empty() {
            return Ok(Tensor::zeros(&[0, m, m]));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let levels = self.pyramid_constants(&tape, pyramid);
        let rois: Vec<RoiRequest> = boxes.iter().map(|&bbox| RoiRequest { batch_index: 0, bbox }).collect();
        let f = self.roi_feature_vars(&levels, &rois, self.config.mask_roi_size)?;
        Ok((*self.mask_vars(&ctx, &f).value()).clone())
    }
}

/// Decode, clip, filter and NMS proposals from per-level RPN outputs
/// (`[H*W*A]` logits and `[H*W*A*4]` deltas of one image). Levels are
/// suppressed independently, then merged by objectness with ties broken by
/// anchor index.
pub fn select_proposals(
    raw: &[(Vec<f32>, Vec<f32>)],
    anchors: &[LevelAnchors],
    image: (usize, usize),
    config: &DetectorConfig,
    top_k: usize,
) -> Vec<Proposal> {
    let mut merged: Vec<(f32, usize, BoxRegion)> = Vec::new();
    let mut offset = 0;
    for ((logits, deltas), la) in raw.iter().zip(anchors) {
        assert_eq!(logits.len(), la.len(), "one logit per anchor");
        let order: Vec<usize> = argsort_desc(logits)
            .into_iter()
            .filter(|&i| la.inside[i])
            .take(config.rpn_pre_nms_top_k)
            .collect();
        let mut boxes = Vec::with_capacity(order.len());
        let mut keep_idx = Vec::with_capacity(order.len());
        for &i in &order {
            let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
            let b = decode_deltas(&la.boxes[i], d, RPN_DELTA_WEIGHTS).clip(image.0, image.1);
            if b.width() >= config.min_box_size && b.height() >= config.min_box_size && b.is_valid() {
                boxes.push(b);
                keep_idx.push(i);
            }
        }
        let positions: Vec<usize> = (0..boxes.len()).collect();
        for p in nms_sorted(&boxes, &positions, config.rpn_nms) {
            merged.push((logits[keep_idx[p]], offset + keep_idx[p], boxes[p]));
        }
        offset += la.len();
    }
    merged.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    merged.truncate(top_k);
    merged
        .into_iter()
        .map(|(l, i, b)| Proposal {
            bbox: b,
            objectness: 1.0 / (1.0 + (-l).exp()),
            anchor_index: i,
        })
        .collect()
}

/// Region classification `softmax(cos(r_b, t) / tau)` over every vocabulary
/// row, background first.
pub fn detection_scores(embedding: &[f32], vocab: &crate::vlm::VocabularyEmbedding, tau: f32) -> Result<Vec<f32>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("detection temperature must be positive, got {tau}")));
    }
    if embedding.len() != vocab.dim() {
        return Err(Error::Shape(format!(
            "region embedding has {} dims, vocabulary has {}",
            embedding.len(),
            vocab.dim()
        )));
    }
    let mut v = embedding.to_vec();
    crate::vlm::normalize(&mut v);
    Ok(crate::vlm::softmax_temperature(&crate::vlm::cosine_logits(&v, vocab), tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::VocabularyEmbedding;

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            fpn_channels: 8,
            head_hidden: 16,
            mask_hidden: 4,
            ..Default::default()
        }
    }

    fn grids(seed: u64, side: usize, ch: [usize; 3]) -> Vec<FeatureGrid<f32>> {
        let mut r = rng(seed);
        (0..3)
            .map(|l| FeatureGrid {
                values: crate::nn::normal_tensor(&mut r, &[side >> l, side >> l, ch[l]], 1.0),
                stride: 8 << l,
                stage_id: l + 2,
            })
            .collect()
    }

    #[test]
    fn level_assignment() {
        assert_eq!(roi_level(&BoxRegion::new(0.0, 0.0, 14.0, 14.0)), 3);
        assert_eq!(roi_level(&BoxRegion::new(0.0, 0.0, 63.0, 63.0)), 3);
        assert_eq!(roi_level(&BoxRegion::new(0.0, 0.0, 64.0, 64.0)), 4);
        assert_eq!(roi_level(&BoxRegion::new(0.0, 0.0, 128.0, 128.0)), 5);
        assert_eq!(roi_level(&BoxRegion::new(0.0, 0.0, 1000.0, 1000.0)), 5);
    }

    #[test]
    fn zero_objectness_orders_by_anchor_index() {
        let m = DetectorModel::<f32>::new(cfg(), [4, 4, 8], 8, 1).unwrap();
        let anchors = m.anchors(64, 64);
        let raw: Vec<_> = anchors.iter().map(|a| (vec![0.0; a.len()], vec![0.0; 4 * a.len()])).collect();
        let p = select_proposals(&raw, &anchors, (64, 64), &m.config, 300);
        assert!(!p.is_empty() && p.len() <= 300);
        assert!(p.windows(2).all(|w| w[0].anchor_index < w[1].anchor_index));
        assert!(p.iter().all(|q| (q.objectness - 0.5).abs() < 1e-7));
    }

    #[test]
    fn eval_proposals_are_capped_and_valid() {
        let m = DetectorModel::<f32>::new(cfg(), [4, 6, 8], 8, 2).unwrap();
        let pyr = m.build_fpn(&grids(3, 16, [4, 6, 8])).unwrap();
        let sides: Vec<usize> = pyr.levels.iter().map(|g| g.height()).collect();
        assert_eq!(sides, vec![16, 8, 4, 2]);
        let p = m.propose_regions(&pyr, Mode::Eval);
        assert!(p.len() <= 300 && !p.is_empty());
        for q in &p {
            assert!(q.bbox.is_valid() && q.bbox.x0 >= 0.0 && q.bbox.x1 <= 128.0);
            assert!(q.objectness > 0.0 && q.objectness < 1.0);
        }
        assert!(m.propose_regions(&pyr, Mode::Train).len() <= 256);
    }

    #[test]
    fn embeddings_boxes_and_masks() {
        let m = DetectorModel::<f32>::new(cfg(), [4, 6, 8], 8, 2).unwrap();
        let pyr = m.build_fpn(&grids(3, 16, [4, 6, 8])).unwrap();
        let boxes = [
            BoxRegion::new(4.0, 4.0, 30.0, 40.0),
            BoxRegion::new(70.0, 60.0, 120.0, 126.0),
            BoxRegion::new(4.0, 4.0, 30.0, 40.0),
        ];
        let e = m.region_embed(&pyr, &boxes).unwrap();
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e.row(0), e.row(2));
        assert_ne!(e.row(0), e.row(1));
        let d = m.class_agnostic_box(&e);
        assert_eq!(d.shape(), &[3, 4]);
        assert!(d.data().iter().all(|&v| v == 0.0), "regressor starts at zero");
        let refined = decode_deltas(&boxes[1], [0.0; 4], crate::geometry::ROI_DELTA_WEIGHTS);
        assert!((refined.x0 - boxes[1].x0).abs() < 1e-4 && (refined.y1 - boxes[1].y1).abs() < 1e-4);
        let masks = m.class_agnostic_mask(&pyr, &boxes).unwrap();
        assert_eq!(masks.shape(), &[3, 28, 28]);
        assert!(masks.all_finite());
    }

    fn vocab(rows: &[[f32; 3]]) -> VocabularyEmbedding {
        VocabularyEmbedding {
            names: (1..rows.len()).map(|i| format!("c{i}")).collect(),
            matrix: Tensor::new(&[rows.len(), 3], rows.iter().flatten().copied().collect()),
            unit_normalized: true,
        }
    }

    #[test]
    fn detection_score_examples() {
        let v = vocab(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let z = detection_scores(&[0.0, 0.0, 2.0], &v, 1e-3).unwrap();
        assert!(z[2] > 0.999_999);
        let u = detection_scores(&[1.0, 1.0, 1.0], &v, 1.0).unwrap();
        assert!(u.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
        assert!(detection_scores(&[1.0, 0.0, 0.0], &v, 0.0).is_err());
        assert!(detection_scores(&[1.0, 0.0, 0.0], &v, -1.0).is_err());

        // Rows chosen so the cosines with e = (1, 0, 0) are 0.2, 0.9, 0.1.
        let row = |c: f32| [c, (1.0 - c * c).sqrt(), 0.0];
        let v = vocab(&[row(0.2), row(0.9), row(0.1)]);
        let z = detection_scores(&[1.0, 0.0, 0.0], &v, 1.0).unwrap();
        let e: Vec<f64> = [0.2f64, 0.9, 0.1].iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in z.iter().zip(&e) {
            assert!((*a as f64 - b / s).abs() < 1e-6);
        }
        assert!((z[0] - 0.255).abs() < 1e-3 && (z[1] - 0.514).abs() < 1e-3 && (z[2] - 0.231).abs() < 1e-3);
    }
}
