//! The trainable detector head over frozen image-encoder features: feature
//! pyramid, region proposals, ROI-Align, the text-embedding classifier,
//! class-agnostic box and mask heads, losses and the training loop.

mod anchors;
mod fpn;
mod heads;
mod loss;
mod model;
mod roi_align;
mod targets;
mod train;

pub use anchors::{level_anchors, LevelAnchors};
pub use fpn::Fpn;
pub use loss::{
    classification_loss, detection_loss, LossConfig, LossTerms, LossValues, ROI_BOX_BETA, RPN_BOX_BETA,
};
pub use model::{
    backbone_channels, detection_scores, roi_level, select_proposals, DetectorConfig, DetectorModel,
    FeaturePyramid, Mode, Proposal, MAX_TAU, MIN_TAU, PYRAMID_STRIDES,
};
pub use roi_align::{roi_align, roi_align_plan, RoiRequest};
pub use targets::{mask_target, roi_targets, rpn_targets, RoiTargets, RpnTargets, TrainTarget};
pub use train::{train_detector, DetectorTrainConfig, TrainReport, TrainedDetector, DETECTOR_KIND};

use crate::autograd::Tape;
use crate::error::Result;
use crate::geometry::BoxRegion;
use crate::gradcheck::{check_store, GradCheckReport};
use crate::nn::{normal_tensor, Ctx, ParamStore};
use crate::seed::rng;
use crate::synthdata::BinaryMask;
use crate::tensor::Tensor;

fn box_target(boxes: &[(BoxRegion, usize)], side: usize) -> TrainTarget {
    TrainTarget {
        boxes: boxes.iter().map(|b| b.0).collect(),
        classes: boxes.iter().map(|b| b.1).collect(),
        masks: boxes
            .iter()
            .map(|(b, _)| {
                let mut m = BinaryMask::new(side, side);
                let (cx, cy) = b.center();
                let r = 0.5 * b.width().min(b.height());
                for y in b.y0 as usize..b.y1 as usize {
                    for x in b.x0 as usize..b.x1 as usize {
                        let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                        m.set(x, y, dx * dx + dy * dy <= r * r);
                    }
                }
                m
            })
            .collect(),
    }
}

/// Central-difference step: large enough that roundoff stays small next to
/// the weak stride-32 gradients, small enough to stay clear of smooth-L1
/// transitions.
const FD_STEP: f64 = 1e-5;

/// Finite-difference check of the full detection loss (RPN, classification,
/// box and mask terms) with respect to every detector parameter, on a
/// two-image, 64-pixel instance with a two-repeat pyramid in double
/// precision. Proposals and samples are drawn once at the initial
/// parameters and held fixed.
pub fn detection_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = DetectorConfig {
        fpn_channels: 3,
        fpn_repeats: 2,
        head_hidden: 5,
        mask_hidden: 2,
        box_roi_size: 3,
        mask_roi_size: 4,
        rpn_batch: 24,
        roi_batch: 8,
        mask_positives: 2,
        init_tau: 0.7,
        ..Default::default()
    };
    let in_ch = [2, 3, 4];
    let mut model = DetectorModel::<f64>::new(cfg, in_ch, 4, seed)?;
    let mut r = rng(seed ^ 0xdead);
    // Move every parameter off its structured initialization: zero biases
    // put ReLU inputs exactly on the kink and a zero regressor has zero
    // smooth-L1 gradient on ground-truth regions.
    for i in 0..model.store.len() {
        if model.store.is_trainable(i) {
            let noise: Tensor<f64> = normal_tensor(&mut r, model.store.value(i).shape(), 0.1);
            let v = model.store.value(i).zip_map(&noise, |a, b| a + b);
            model.store.set(i, v);
        }
    }
    let feats: Vec<Tensor<f64>> = (0..3).map(|l| normal_tensor(&mut r, &[2, 8 >> l, 8 >> l, in_ch[l]], 1.0)).collect();
    let vocab: Tensor<f64> = {
        let raw: Tensor<f64> = normal_tensor(&mut r, &[3, 4], 1.0);
        let rows: Vec<f64> = raw
            .data()
            .chunks(4)
            .flat_map(|row| {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter().map(move |x| x / n).collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(&[3, 4], rows)
    };
    let targets = vec![
        box_target(&[(BoxRegion::new(6.0, 8.0, 30.0, 28.0), 1), (BoxRegion::new(36.0, 30.0, 60.0, 62.0), 2)], 64),
        box_target(&[(BoxRegion::new(20.0, 16.0, 44.0, 50.0), 2)], 64),
    ];
    let loss_cfg = LossConfig {
        background_weight: 0.8,
        ..Default::default()
    };

    // Fixed sampling from the initial parameters.
    let (rpn_t, roi_t) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, true, false);
        let f: Vec<_> = feats.iter().map(|t| tape.constant(t.clone())).collect();
        let pyr = model.pyramid_vars(&ctx, &f)?;
        let rpn = model.rpn_vars(&ctx, &pyr);
        let anchors = model.anchors(64, 64);
        let proposals: Vec<Vec<BoxRegion>> = (0..2)
            .map(|b| {
                let raw: Vec<(Vec<f32>, Vec<f32>)> = rpn
                    .iter()
                    .map(|(o, d)| {
                        let (o, d) = (o.value().to_f32_vec(), d.value().to_f32_vec());
                        let (no, nd) = (o.len() / 2, d.len() / 2);
                        (o[b * no..(b + 1) * no].to_vec(), d[b * nd..(b + 1) * nd].to_vec())
                    })
                    .collect();
                select_proposals(&raw, &anchors, (64, 64), &model.config, 16)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect()
            })
            .collect();
        let mut sr = rng(seed ^ 0xbeef);
        (
            rpn_targets(&anchors, &targets, &model.config, &mut sr),
            roi_targets(&proposals, &targets, &model.config, &mut sr),
        )
    };

    let loss_with = |store: &ParamStore<f64>, grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut m = model.clone();
        m.store = store.clone();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store, true, grads);
        let f: Vec<_> = feats.iter().map(|t| tape.constant(t.clone())).collect();
        let pyr = m.pyramid_vars(&ctx, &f)?;
        let rpn = m.rpn_vars(&ctx, &pyr);
        let v = tape.constant(vocab.clone());
        let terms = detection_loss(&m, &ctx, &pyr, &rpn, &rpn_t, &roi_t, &v, &loss_cfg)?;
        let value = terms.total.item();
        let g = if grads { tape.backward(terms.total).for_store(&m.store) } else { Vec::new() };
        Ok((value, g))
    };
    let (_, analytic) = loss_with(&model.store, true)?;
    Ok(check_store(&model.store, &analytic, FD_STEP, &|s| loss_with(s, false).expect("forward").0))
}
