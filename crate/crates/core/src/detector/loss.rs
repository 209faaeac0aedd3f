use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{Real, Tensor};

use super::model::DetectorModel;
use super::targets::{RoiTargets, RpnTargets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight gamma of background rows in the classification loss.
    pub background_weight: f64,
    pub rpn_objectness_weight: f64,
    pub rpn_box_weight: f64,
    pub classification_weight: f64,
    pub box_weight: f64,
    pub mask_weight: f64,
    /// Learning rate of the image encoder; 0 keeps it frozen.
    pub backbone_lr: f64,
    /// Global-norm clip applied to image-encoder gradients when
    /// `backbone_lr > 0`.
    pub backbone_clip_norm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            background_weight: 0.9,
            rpn_objectness_weight: 1.0,
            rpn_box_weight: 1.0,
            classification_weight: 1.0,
            box_weight: 1.0,
            mask_weight: 1.0,
            backbone_lr: 0.0,
            backbone_clip_norm: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.background_weight > 0.0 && self.background_weight <= 1.0) {
            return Err(Error::Config(format!(
                "detector.background_weight {} outside (0, 1]",
                self.background_weight
            )));
        }
        if !(self.backbone_lr >= 0.0) || !(self.backbone_clip_norm > 0.0) {
            return Err(Error::Config("detector.backbone_lr must be >= 0 and backbone_clip_norm > 0".into()));
        }
        let w = [
            self.rpn_objectness_weight,
            self.rpn_box_weight,
            self.classification_weight,
            self.box_weight,
            self.mask_weight,
        ];
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn finetune(&self) -> bool {
        self.backbone_lr > 0.0
    }
}

/// Smooth-L1 transition of the RPN box loss.
pub const RPN_BOX_BETA: f64 = 1.0 / 9.0;
/// Smooth-L1 transition of the second-stage box loss.
pub const ROI_BOX_BETA: f64 = 1.0;

pub struct LossTerms<'a, R: Real> {
    pub rpn_objectness: Var<'a, R>,
    pub rpn_box: Var<'a, R>,
    pub classification: Var<'a, R>,
    pub box_regression: Var<'a, R>,
    pub mask: Var<'a, R>,
    pub total: Var<'a, R>,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub classification: f64,
    pub box_regression: f64,
    pub mask: f64,
    pub total: f64,
}

impl<R: Real> LossTerms<'_, R> {
    pub fn values(&self) -> LossValues {
        LossValues {
            rpn_objectness: self.rpn_objectness.item().to_f64_lossy(),
            rpn_box: self.rpn_box.item().to_f64_lossy(),
            classification: self.classification.item().to_f64_lossy(),
            box_regression: self.box_regression.item().to_f64_lossy(),
            mask: self.mask.item().to_f64_lossy(),
            total: self.total.item().to_f64_lossy(),
        }
    }
}

impl LossValues {
    pub fn add(&mut self, o: &LossValues) {
        self.rpn_objectness += o.rpn_objectness;
        self.rpn_box += o.rpn_box;
        self.classification += o.classification;
        self.box_regression += o.box_regression;
        self.mask += o.mask;
        self.total += o.total;
    }

    pub fn scaled(&self, k: f64) -> LossValues {
        LossValues {
            rpn_objectness: self.rpn_objectness * k,
            rpn_box: self.rpn_box * k,
            classification: self.classification * k,
            box_regression: self.box_regression * k,
            mask: self.mask * k,
            total: self.total * k,
        }
    }
}

fn cast<R: Real>(v: &[f32]) -> Vec<R> {
    v.iter().map(|&x| R::from_f64_lossy(x as f64)).collect()
}

/// Weighted cross-entropy over `[R, K+1]` class logits with background rows
/// weighted by `background_weight`, normalized by the number of rows.
pub fn classification_loss<'a, R: Real>(logits: &Var<'a, R>, classes: &[usize], background_weight: f64) -> Var<'a, R> {
    let weights: Vec<R> = classes
        .iter()
        .map(|&c| R::from_f64_lossy(if c == 0 { background_weight } else { 1.0 }))
        .collect();
    let norm = R::from_usize(classes.len().max(1)).unwrap();
    logits.weighted_cross_entropy(classes, &weights, norm)
}

/// All detector losses of one batch. `vocab` holds the training
/// vocabulary rows (background first, base categories only).
#[allow(clippy::too_many_arguments)]
pub fn detection_loss<'a, R: Real>(
    model: &DetectorModel<R>,
    ctx: &Ctx<'a, R>,
    pyramid: &[Var<'a, R>],
    rpn: &[(Var<'a, R>, Var<'a, R>)],
    rpn_targets: &RpnTargets,
    roi_targets: &RoiTargets,
    vocab: &Var<'a, R>,
    config: &LossConfig,
) -> Result<LossTerms<'a, R>> {
    let k = vocab.shape()[0];
    if let Some(&c) = roi_targets.classes.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!(
            "training target class {c} is outside the {}-category training vocabulary",
            k - 1
        )));
    }
    if roi_targets.rois.is_empty() {
        return Err(Error::Invalid("no sampled regions in the batch".into()));
    }
    let tape = ctx.tape;
    let rpn_norm = R::from_usize(rpn_targets.sampled.max(1)).unwrap();
    let mut obj_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (l, (obj, deltas)) in rpn.iter().enumerate() {
        obj_terms.push(obj.bce_with_logits(
            &cast(&rpn_targets.labels[l]),
            &cast(&rpn_targets.label_weights[l]),
            rpn_norm,
        ));
        box_terms.push(deltas.smooth_l1(
            &cast(&rpn_targets.deltas[l]),
            &cast(&rpn_targets.delta_weights[l]),
            R::from_f64_lossy(RPN_BOX_BETA),
            rpn_norm,
        ));
    }
    let sum = |v: Vec<Var<'a, R>>| v.into_iter().reduce(|a, b| a.add(&b)).expect("at least one level");
    let rpn_objectness = sum(obj_terms);
    let rpn_box = sum(box_terms);

    let roi_feats = model.roi_feature_vars(pyramid, &roi_targets.rois, model.config.box_roi_size)?;
    let emb = model.embed_vars(ctx, &roi_feats);
    let logits = model.logit_vars(ctx, &emb, vocab);
    let classification = classification_loss(&logits, &roi_targets.classes, config.background_weight);
    let n = R::from_usize(roi_targets.rois.len()).unwrap();
    let box_regression = model.delta_vars(ctx, &emb).smooth_l1(
        &cast(&roi_targets.box_targets),
        &cast(&roi_targets.box_weights),
        R::from_f64_lossy(ROI_BOX_BETA),
        n,
    );
    let mask = if roi_targets.mask_rois.is_empty() {
        tape.constant(Tensor::scalar(R::zero()))
    } else {
        let f = model.roi_feature_vars(pyramid, &roi_targets.mask_rois, model.config.mask_roi_size)?;
        let m = model.mask_vars(ctx, &f);
        let count = roi_targets.mask_targets.len();
        m.bce_with_logits(
            &cast(&roi_targets.mask_targets),
            &vec![R::one(); count],
            R::from_usize(count).unwrap(),
        )
    };
    let w = |v: &Var<'a, R>, x: f64| v.scale(R::from_f64_lossy(x));
    let total = w(&rpn_objectness, config.rpn_objectness_weight)
        .add(&w(&rpn_box, config.rpn_box_weight))
        .add(&w(&classification, config.classification_weight))
        .add(&w(&box_regression, config.box_weight))
        .add(&w(&mask, config.mask_weight));
    Ok(LossTerms {
        rpn_objectness,
        rpn_box,
        classification,
        box_regression,
        mask,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn background_weight_scales_linearly() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
        let full = classification_loss(&logits, &[0, 0, 0], 1.0).item();
        let half = classification_loss(&logits, &[0, 0, 0], 0.5).item();
        assert!((half - 0.5 * full).abs() < 1e-12);
        // Foreground rows are unaffected by gamma.
        let a = classification_loss(&logits, &[1, 2, 3], 1.0).item();
        let b = classification_loss(&logits, &[1, 2, 3], 0.5).item();
        assert_eq!(a, b);
    }

    #[test]
    fn confident_correct_predictions_give_vanishing_loss() {
        let tape = Tape::<f64>::new();
        let mut data = vec![0.0; 8];
        data[1] = 60.0;
        data[4] = 60.0;
        let logits = tape.constant(Tensor::new(&[2, 4], data));
        assert!(classification_loss(&logits, &[1, 0], 0.9).item() < 1e-20);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for g in [0.0, -0.1, 1.5] {
            let c = LossConfig {
                background_weight: g,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
        assert!(!LossConfig::default().finetune());
    }
}
