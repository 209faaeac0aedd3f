//! Seeded end-to-end steps shared by the CLI, the ablation runner and the
//! acceptance harness. Every step derives its seed from the run config's
//! global seed with its own tag.

use std::path::Path;

use crate::config::RunConfig;
use crate::detector::{train_detector, TrainedDetector};
use crate::error::Result;
use crate::seed::derive_seed;
use crate::synthdata::{
    build_caption_dataset, build_detection_dataset, split_vocabulary, CaptionDataset, DetectionDataset, VocabularySplit,
};
use crate::vlm::{cached_vocabulary_embeddings, pretrain, PretrainLog, VlmModel, VocabularyEmbedding, PROMPT_TEMPLATES};

pub fn vocabulary_split(cfg: &RunConfig) -> Result<VocabularySplit> {
    split_vocabulary(
        &cfg.data.scene.category_names(),
        cfg.data.sizes.novel_fraction,
        derive_seed(cfg.seed, "split", 0),
    )
}

/// Train and val detection sets over the full vocabulary (novel instances
/// included; training restricts itself to base annotations).
pub fn detection_datasets(cfg: &RunConfig) -> Result<(DetectionDataset, DetectionDataset)> {
    let split = vocabulary_split(cfg)?;
    let s = &cfg.data.sizes;
    let train = build_detection_dataset(&cfg.data.scene, split.clone(), s.train_images, derive_seed(cfg.seed, "data-train", 0))?;
    let val = build_detection_dataset(&cfg.data.scene, split, s.val_images, derive_seed(cfg.seed, "data-val", 0))?;
    Ok((train, val))
}

pub fn caption_dataset(cfg: &RunConfig) -> Result<CaptionDataset> {
    build_caption_dataset(&cfg.data.scene, cfg.data.sizes.caption_images, derive_seed(cfg.seed, "data-captions", 0))
}

/// Val-style set over the transfer vocabulary, every category novel.
pub fn transfer_dataset(cfg: &RunConfig) -> Result<DetectionDataset> {
    let scene = cfg.transfer_scene();
    let split = VocabularySplit::all_novel(scene.category_names());
    build_detection_dataset(&scene, split, cfg.eval.transfer_images, derive_seed(cfg.seed, "data-transfer", 0))
}

pub fn pretrain_vlm(cfg: &RunConfig, captions: &CaptionDataset) -> Result<(VlmModel<f32>, PretrainLog)> {
    pretrain(captions, &cfg.vlm.model, &cfg.vlm.pretrain, derive_seed(cfg.seed, "vlm", 0))
}

/// Prompt-averaged embeddings of `names`, cached under `cache_dir` if set.
pub fn vocabulary(vlm: &VlmModel<f32>, names: &[String], cache_dir: Option<&Path>) -> Result<VocabularyEmbedding> {
    cached_vocabulary_embeddings(vlm, names, &PROMPT_TEMPLATES, cache_dir)
}

/// Seed of detector run `run`.
pub fn run_seed(cfg: &RunConfig, run: usize) -> u64 {
    derive_seed(cfg.seed, "run", run as u64)
}

/// Detector run `run` on the base annotations of `train`.
pub fn train_run(
    cfg: &RunConfig,
    vlm: &VlmModel<f32>,
    train: &DetectionDataset,
    vocab: &VocabularyEmbedding,
    run: usize,
) -> Result<TrainedDetector> {
    let base = train.restricted_to(&train.split.base_ids);
    let d = &cfg.detector;
    train_detector(vlm, &base, vocab, &d.model, &d.loss, &d.train, run_seed(cfg, run))
}
