use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, Manifest, StoreSection};
use crate::error::{Error, Result};
use crate::geometry::BoxRegion;
use crate::image::{to_batch, RgbImage};
use crate::nn::{apply_bn_updates, Ctx, ParamStore};
use crate::optim::{clip_global_norm, Sgd, StepSchedule};
use crate::seed::{derive_seed, rng};
use crate::synthdata::DetectionDataset;
use crate::tensor::Tensor;
use crate::vlm::{FeatureGrid, Tokenizer, VlmConfig, VlmModel, VocabularyEmbedding, IMAGE_PREFIX};

use super::loss::{detection_loss, LossConfig, LossValues};
use super::model::{backbone_channels, select_proposals, DetectorConfig, DetectorModel};
use super::targets::{roi_targets, rpn_targets, TrainTarget};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Fractions of `steps` at which the learning rate is multiplied by
    /// `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub flip: bool,
    pub log_every: usize,
    /// Steps between frozen-backbone checks (also checked at the end).
    pub check_every: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            milestones: vec![0.8, 0.9, 0.95],
            lr_decay: 0.1,
            flip: true,
            log_every: 50,
            check_every: 100,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("detector.batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("detector.lr must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("detector.milestones must be fractions in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean losses since the previous entry)`
    pub curve: Vec<(usize, LossValues)>,
    pub steps: usize,
    pub trainable_params: usize,
    /// Mean wall time of one optimizer step.
    pub step_time_ms: f64,
    pub seconds: f64,
    pub finetuned: bool,
    /// Image-encoder arrays that differ from the starting checkpoint.
    pub backbone_changed: Vec<String>,
    pub backbone_max_delta: f64,
    pub final_tau: f64,
}

/// A detector together with the VLM whose features it reads (a finetuned
/// copy when `backbone_lr > 0`).
pub struct TrainedDetector {
    pub detector: DetectorModel<f32>,
    pub vlm: VlmModel<f32>,
    /// Dataset category ids the classifier was trained on, in training
    /// vocabulary order.
    pub base_ids: Vec<usize>,
    pub report: TrainReport,
}

fn frozen_check(reference: &ParamStore<f32>, current: &ParamStore<f32>, checksum: &str) -> Result<()> {
    if current.checksum() != checksum {
        let name = current
            .diff_names(reference)
            .into_iter()
            .next()
            .unwrap_or_else(|| "<unknown>".to_string());
        return Err(Error::FrozenViolation { name });
    }
    Ok(())
}

/// Split batched RPN outputs into per-image `(logits, deltas)` per level.
fn per_image_rpn(rpn: &[(Var<'_, f32>, Var<'_, f32>)], batch: usize) -> Vec<Vec<(Vec<f32>, Vec<f32>)>> {
    let levels: Vec<(std::sync::Arc<Tensor<f32>>, std::sync::Arc<Tensor<f32>>)> =
        rpn.iter().map(|(o, d)| (o.value(), d.value())).collect();
    (0..batch)
        .map(|b| {
            levels
                .iter()
                .map(|(o, d)| {
                    let (no, nd) = (o.len() / batch, d.len() / batch);
                    (o.data()[b * no..(b + 1) * no].to_vec(), d.data()[b * nd..(b + 1) * nd].to_vec())
                })
                .collect()
        })
        .collect()
}

fn max_delta(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f64 {
    (0..a.len())
        .map(|i| a.value(i).max_abs_diff(b.value(i)) as f64)
        .fold(0.0, f64::max)
}

/// Train the detector head on base-category annotations over frozen (or,
/// with `backbone_lr > 0`, slowly finetuned) image-encoder features.
///
/// `vocab` covers every dataset category; only the background and base rows
/// reach the classifier. Annotations of novel categories are an error.
pub fn train_detector(
    vlm: &VlmModel<f32>,
    dataset: &DetectionDataset,
    vocab: &VocabularyEmbedding,
    det_config: &DetectorConfig,
    loss_config: &LossConfig,
    train_config: &DetectorTrainConfig,
    seed: u64,
) -> Result<TrainedDetector> {
    det_config.validate()?;
    loss_config.validate()?;
    train_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("detection dataset is empty".into()));
    }
    if vocab.names != dataset.categories() {
        return Err(Error::Vocabulary("vocabulary names do not match the dataset categories".into()));
    }
    let base_ids: Vec<usize> = dataset.split.base_ids.iter().copied().collect();
    let train_vocab = vocab.select(&base_ids);
    let targets: Vec<TrainTarget> = dataset
        .samples
        .iter()
        .map(|s| TrainTarget::from_annotations(&s.annotations, &base_ids))
        .collect::<Result<_>>()?;
    let size = (dataset.samples[0].image.width, dataset.samples[0].image.height);
    if let Some(s) = dataset.samples.iter().find(|s| (s.image.width, s.image.height) != size) {
        return Err(Error::Invalid(format!("image {} differs in size from the first image", s.id)));
    }

    let finetune = loss_config.finetune();
    let mut det = DetectorModel::<f32>::new(
        det_config.clone(),
        backbone_channels(&vlm.config),
        vlm.config.embed_dim,
        derive_seed(seed, "det-init", 0),
    )?;
    let reference = vlm.store.clone();
    let frozen_sum = vlm.store.checksum();
    let mut backbone = vlm.clone();
    let image_params = vlm.image_param_indices();
    let trainable_params = det.store.num_trainable()
        + if finetune {
            image_params.iter().map(|&i| vlm.store.value(i).len()).sum::<usize>()
        } else {
            0
        };

    let sched = StepSchedule {
        base_lr: train_config.lr,
        warmup_steps: train_config.warmup_steps,
        total_steps: train_config.steps,
        milestones: train_config.milestones.clone(),
        decay: train_config.lr_decay,
    };
    let mut opt = Sgd::new(train_config.momentum, train_config.weight_decay);
    let mut backbone_opt = Sgd::new(train_config.momentum, train_config.weight_decay);
    let vocab_tensor = train_vocab.matrix.clone();
    let n = dataset.len();
    let bsz = train_config.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    let mut aug = rng(derive_seed(seed, "det-augment", 0));
    let mut sampler = rng(derive_seed(seed, "det-sample", 0));
    let mut report = TrainReport {
        trainable_params,
        finetuned: finetune,
        ..Default::default()
    };
    let mut running = (LossValues::default(), 0usize);
    let start = Instant::now();
    let mut step_seconds = 0.0;
    for step in 0..train_config.steps {
        let t0 = Instant::now();
        if cursor + bsz > n {
            order = (0..n).collect();
            order.shuffle(&mut rng(derive_seed(seed, "det-order", epoch)));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let mut images: Vec<RgbImage> = Vec::with_capacity(bsz);
        let mut batch_targets: Vec<TrainTarget> = Vec::with_capacity(bsz);
        for &i in idx {
            let s = &dataset.samples[i];
            if train_config.flip && aug.gen_bool(0.5) {
                images.push(s.image.hflip());
                batch_targets.push(targets[i].hflip(size.0));
            } else {
                images.push(s.image.clone());
                batch_targets.push(targets[i].clone());
            }
        }
        let refs: Vec<&RgbImage> = images.iter().collect();
        let batch = to_batch::<f32>(&refs)?;

        let tape = Tape::new();
        let (feats, bctx) = if finetune {
            // Normalization statistics stay frozen while finetuning.
            let bctx = Ctx::new(&tape, &backbone.store, false, true);
            let x = tape.constant(batch);
            (backbone.image_features(&bctx, &x)?, Some(bctx))
        } else {
            let f = backbone.backbone(batch)?;
            (f.into_iter().map(|t| tape.constant(t)).collect(), None)
        };
        let dctx = Ctx::new(&tape, &det.store, true, true);
        let pyramid = det.pyramid_vars(&dctx, &feats)?;
        let rpn = det.rpn_vars(&dctx, &pyramid);
        let anchors = det.anchors(size.0, size.1);
        let proposals: Vec<Vec<BoxRegion>> = per_image_rpn(&rpn, bsz)
            .iter()
            .map(|raw| {
                select_proposals(raw, &anchors, size, &det.config, det.config.rpn_train_top_k)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect()
            })
            .collect();
        let rpn_t = rpn_targets(&anchors, &batch_targets, &det.config, &mut sampler);
        let roi_t = roi_targets(&proposals, &batch_targets, &det.config, &mut sampler);
        let vocab_var = tape.constant(vocab_tensor.clone());
        let losses = detection_loss(&det, &dctx, &pyramid, &rpn, &rpn_t, &roi_t, &vocab_var, loss_config)?;
        let values = losses.values();
        if !values.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: values.total,
            });
        }
        let grads = tape.backward(losses.total);
        let det_grads = grads.for_store(&det.store);
        let bn = dctx.take_bn_updates();
        let mut bb_grads = bctx.as_ref().map(|_| grads.for_store(&backbone.store));
        drop(dctx);
        drop(bctx);
        let lr = sched.lr(step);
        opt.step(&mut det.store, &det_grads, lr);
        apply_bn_updates(&mut det.store, bn);
        det.clamp_tau();
        if let Some(g) = bb_grads.as_mut() {
            for (i, gi) in g.iter_mut().enumerate() {
                if !backbone.store.name(i).starts_with(IMAGE_PREFIX) {
                    *gi = None;
                }
            }
            clip_global_norm(g, loss_config.backbone_clip_norm);
            let scale = if train_config.lr > 0.0 { lr / train_config.lr } else { 0.0 };
            backbone_opt.step(&mut backbone.store, g, loss_config.backbone_lr * scale);
        }
        if !det.store.all_finite() || !backbone.store.all_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        step_seconds += t0.elapsed().as_secs_f64();

        running.0.add(&values);
        running.1 += 1;
        if (step + 1) % train_config.log_every.max(1) == 0 || step + 1 == train_config.steps {
            let mean = running.0.scaled(1.0 / running.1 as f64);
            log::info!(
                "detector step {} loss {:.4} (rpn {:.3}/{:.3} cls {:.3} box {:.3} mask {:.3}) tau {:.3}",
                step + 1,
                mean.total,
                mean.rpn_objectness,
                mean.rpn_box,
                mean.classification,
                mean.box_regression,
                mean.mask,
                det.tau()
            );
            report.curve.push((step + 1, mean));
            running = (LossValues::default(), 0);
        }
        if !finetune && (step + 1) % train_config.check_every.max(1) == 0 {
            frozen_check(&reference, &vlm.store, &frozen_sum)?;
            frozen_check(&reference, &backbone.store, &frozen_sum)?;
        }
    }
    if !finetune {
        frozen_check(&reference, &vlm.store, &frozen_sum)?;
        frozen_check(&reference, &backbone.store, &frozen_sum)?;
    }
    report.steps = train_config.steps;
    report.seconds = start.elapsed().as_secs_f64();
    report.step_time_ms = if train_config.steps > 0 {
        1e3 * step_seconds / train_config.steps as f64
    } else {
        0.0
    };
    report.backbone_changed = backbone
        .store
        .diff_names(&reference)
        .into_iter()
        .filter(|n| n.starts_with(IMAGE_PREFIX))
        .collect();
    report.backbone_max_delta = max_delta(&backbone.store, &reference);
    report.final_tau = det.tau();
    Ok(TrainedDetector {
        detector: det,
        vlm: backbone,
        base_ids,
        report,
    })
}

pub const DETECTOR_KIND: &str = "detector";
const VLM_SECTION: &str = "vlm/";
const DETECTOR_SECTION: &str = "detector/";

#[derive(Serialize, Deserialize)]
struct DetectorManifestConfig {
    detector: DetectorConfig,
    in_channels: [usize; 3],
    embed_dim: usize,
    vlm: VlmConfig,
    vocab_size: usize,
}

fn substore(store: &ParamStore<f32>, keep: impl Fn(&str) -> bool) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for i in 0..store.len() {
        if keep(store.name(i)) {
            if store.is_trainable(i) {
                out.add(store.name(i), store.value(i).clone());
            } else {
                out.add_buffer(store.name(i), store.value(i).clone());
            }
        }
    }
    out
}

impl TrainedDetector {
    /// One directory with the VLM arrays (the frozen partition, or the image
    /// encoder as trainable after finetuning) and the detector arrays.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let cfg = serde_json::to_value(DetectorManifestConfig {
            detector: self.detector.config.clone(),
            in_channels: self.detector.in_channels,
            embed_dim: self.detector.embed_dim,
            vlm: self.vlm.config.clone(),
            vocab_size: self.vlm.tokenizer.vocab_size(),
        })
        .expect("config serializes");
        let finetuned = self.report.finetuned;
        let moved = substore(&self.vlm.store, |n| finetuned && n.starts_with(IMAGE_PREFIX));
        let fixed = substore(&self.vlm.store, |n| !(finetuned && n.starts_with(IMAGE_PREFIX)));
        checkpoint::write_checkpoint(
            dir,
            DETECTOR_KIND,
            &cfg,
            &[
                StoreSection {
                    prefix: VLM_SECTION,
                    store: &fixed,
                    frozen: true,
                },
                StoreSection {
                    prefix: VLM_SECTION,
                    store: &moved,
                    frozen: false,
                },
                StoreSection {
                    prefix: DETECTOR_SECTION,
                    store: &self.detector.store,
                    frozen: false,
                },
            ],
            serde_json::json!({
                "tokenizer": self.vlm.tokenizer.words(),
                "base_ids": self.base_ids,
                "vlm_checksum": self.vlm.checksum(),
                "detector_checksum": self.detector.store.checksum(),
                "report": self.report,
            }),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        let bad = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        if m.kind != DETECTOR_KIND {
            return Err(bad(format!("expected a {DETECTOR_KIND} checkpoint, found {}", m.kind)));
        }
        let cfg: DetectorManifestConfig = serde_json::from_value(m.config.clone()).map_err(|e| bad(e.to_string()))?;
        let words: Vec<String> =
            serde_json::from_value(m.extra["tokenizer"].clone()).map_err(|e| bad(format!("tokenizer: {e}")))?;
        if words.len() != cfg.vocab_size {
            return Err(bad("tokenizer size does not match the config".into()));
        }
        let mut vlm = VlmModel::new(cfg.vlm, Tokenizer::from_words(words), 0)?;
        checkpoint::load_section(dir, &m, VLM_SECTION, &mut vlm.store)?;
        let mut detector = DetectorModel::new(cfg.detector, cfg.in_channels, cfg.embed_dim, 0)?;
        checkpoint::load_section(dir, &m, DETECTOR_SECTION, &mut detector.store)?;
        let base_ids: Vec<usize> =
            serde_json::from_value(m.extra["base_ids"].clone()).map_err(|e| bad(format!("base_ids: {e}")))?;
        let report: TrainReport =
            serde_json::from_value(m.extra["report"].clone()).map_err(|e| bad(format!("report: {e}")))?;
        Ok(Self {
            detector,
            vlm,
            base_ids,
            report,
        })
    }

    /// Backbone grids of one image from the (frozen or finetuned) encoder.
    pub fn encode_image(&self, image: &RgbImage) -> Result<Vec<FeatureGrid<f32>>> {
        self.vlm.encode_image(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_detection_dataset, split_vocabulary, SceneConfig};
    use crate::vlm::{build_vocabulary_embeddings, BACKGROUND_PHRASE, PROMPT_TEMPLATES};

    struct Fixture {
        vlm: VlmModel<f32>,
        data: DetectionDataset,
        vocab: VocabularyEmbedding,
    }

    fn fixture() -> Fixture {
        let scene = SceneConfig {
            image_size: 64,
            min_object_size: 10.0,
            max_object_size: 24.0,
            max_objects: 3,
            ..Default::default()
        };
        let names = scene.category_names();
        let split = split_vocabulary(&names, 0.2, 5).unwrap();
        let base = split.base_ids.clone();
        let data = build_detection_dataset(&scene, split, 6, 5).unwrap().restricted_to(&base);
        let mut corpus: Vec<String> = names.clone();
        corpus.extend(PROMPT_TEMPLATES.iter().map(|t| t.replace("{}", "")));
        let tok = Tokenizer::build(corpus.iter().map(|s| s.as_str()), &[BACKGROUND_PHRASE]);
        let cfg = VlmConfig {
            image_size: 64,
            widths: [4, 8, 8],
            embed_dim: 8,
            pool_heads: 2,
            text_width: 8,
            text_heads: 2,
            text_ffn: 16,
            ..Default::default()
        };
        let vlm = VlmModel::new(cfg, tok, 1).unwrap();
        let vocab = build_vocabulary_embeddings(&vlm, &names, &PROMPT_TEMPLATES).unwrap();
        Fixture { vlm, data, vocab }
    }

    fn det_cfg() -> DetectorConfig {
        DetectorConfig {
            fpn_channels: 8,
            head_hidden: 16,
            mask_hidden: 4,
            roi_batch: 16,
            ..Default::default()
        }
    }

    fn train_cfg(steps: usize) -> DetectorTrainConfig {
        DetectorTrainConfig {
            steps,
            batch_size: 2,
            warmup_steps: 2,
            log_every: 5,
            check_every: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_is_initialization() {
        let f = fixture();
        let t = train_detector(&f.vlm, &f.data, &f.vocab, &det_cfg(), &LossConfig::default(), &train_cfg(0), 9).unwrap();
        let init = DetectorModel::<f32>::new(det_cfg(), backbone_channels(&f.vlm.config), 8, derive_seed(9, "det-init", 0)).unwrap();
        assert_eq!(t.detector.store.checksum(), init.store.checksum());
    }

    #[test]
    fn frozen_training_keeps_the_backbone_and_round_trips() {
        let f = fixture();
        let before = f.vlm.checksum();
        let t = train_detector(&f.vlm, &f.data, &f.vocab, &det_cfg(), &LossConfig::default(), &train_cfg(10), 9).unwrap();
        assert_eq!(t.vlm.checksum(), before);
        assert!(t.report.backbone_changed.is_empty());
        assert_eq!(t.report.backbone_max_delta, 0.0);
        assert_eq!(t.report.curve.len(), 2);
        assert!(t.report.curve.iter().all(|(_, l)| l.total.is_finite()));
        let again = train_detector(&f.vlm, &f.data, &f.vocab, &det_cfg(), &LossConfig::default(), &train_cfg(10), 9).unwrap();
        assert_eq!(again.detector.store.checksum(), t.detector.store.checksum());

        let dir = tempfile::tempdir().unwrap();
        let m = t.save(dir.path()).unwrap();
        assert!(m.frozen.iter().all(|n| n.starts_with("vlm/")));
        assert!(m.trainable.iter().all(|n| n.starts_with("detector/")));
        let back = TrainedDetector::load(dir.path()).unwrap();
        assert_eq!(back.vlm.checksum(), before);
        assert_eq!(back.detector.store.checksum(), t.detector.store.checksum());
        assert_eq!(back.base_ids, t.base_ids);
    }

    #[test]
    fn finetuning_moves_only_the_image_encoder() {
        let f = fixture();
        let loss = LossConfig {
            backbone_lr: 1e-3,
            ..Default::default()
        };
        let frozen = train_detector(&f.vlm, &f.data, &f.vocab, &det_cfg(), &LossConfig::default(), &train_cfg(3), 9).unwrap();
        let tuned = train_detector(&f.vlm, &f.data, &f.vocab, &det_cfg(), &loss, &train_cfg(3), 9).unwrap();
        assert!(frozen.report.trainable_params < tuned.report.trainable_params);
        assert!(!tuned.report.backbone_changed.is_empty());
        assert!(tuned.report.backbone_max_delta > 0.0);
        let changed = tuned.vlm.store.diff_names(&f.vlm.store);
        assert!(changed.iter().all(|n| n.starts_with(IMAGE_PREFIX)), "{changed:?}");
        assert!(tuned.report.step_time_ms > 0.0 && frozen.report.step_time_ms > 0.0);

        let dir = tempfile::tempdir().unwrap();
        let m = tuned.save(dir.path()).unwrap();
        assert!(m.trainable.iter().any(|n| n.starts_with("vlm/image.")));
        assert!(m.frozen.iter().all(|n| !n.starts_with("vlm/image.")));
    }

    #[test]
    fn novel_annotations_are_rejected() {
        let f = fixture();
        let scene = SceneConfig {
            image_size: 64,
            min_object_size: 10.0,
            max_object_size: 24.0,
            ..Default::default()
        };
        let full = build_detection_dataset(&scene, f.data.split.clone(), 6, 5).unwrap();
        let err = train_detector(&f.vlm, &full, &f.vocab, &det_cfg(), &LossConfig::default(), &train_cfg(1), 9);
        assert!(err.is_err());
    }
}
