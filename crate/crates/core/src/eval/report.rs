use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::dir_digest;
use crate::detector::TrainedDetector;
use crate::error::{Error, Result};
use crate::fusion::{predict_raw, rank_detections, swap_vocabulary, Fuser, FusionParams, RawPrediction};
use crate::synthdata::{DetectionDataset, VocabularySplit};
use crate::vlm::{VocabularyEmbedding, PROMPT_TEMPLATES};

use super::ap::{box_ap, ApSummary, ScoredBox};

/// Mean over runs; `std` (sample, n - 1) only when there are several runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub summary: ApSummary,
    pub trainable_params: usize,
    pub step_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<String>,
    pub novel_ids: Vec<usize>,
    /// Mean per-category AP over runs (`None` without ground truth).
    pub per_category: Vec<Option<f64>>,
    pub ap_novel: Stat,
    pub ap_base: Stat,
    pub ap_all: Stat,
    pub ap50: Stat,
    pub ap75: Stat,
    pub run_seeds: Vec<u64>,
    pub trainable_params: usize,
    pub step_time_ms: f64,
    pub runs: Vec<RunResult>,
}

/// Fusion-independent predictions for every image of `dataset`, in order.
pub fn predict_dataset(
    trained: &TrainedDetector,
    dataset: &DetectionDataset,
    vocab: &VocabularyEmbedding,
) -> Result<Vec<RawPrediction>> {
    dataset.samples.iter().map(|s| predict_raw(trained, &s.image, vocab)).collect()
}

/// Fuse, rank and score cached predictions (aligned with `dataset.samples`)
/// with base/novel membership from `split`.
pub fn score_predictions(
    raws: &[RawPrediction],
    dataset: &DetectionDataset,
    split: &VocabularySplit,
    fuser: &Fuser,
) -> Result<ApSummary> {
    if raws.len() != dataset.len() {
        return Err(Error::Invalid(format!(
            "{} cached predictions for {} images",
            raws.len(),
            dataset.len()
        )));
    }
    let mut preds = BTreeMap::new();
    for (raw, s) in raws.iter().zip(&dataset.samples) {
        let dets = rank_detections(raw, fuser)?
            .into_iter()
            .map(|r| ScoredBox {
                bbox: r.bbox,
                category_id: r.category_id,
                score: r.score,
            })
            .collect();
        preds.insert(s.id, dets);
    }
    Ok(box_ap(dataset, split, &preds))
}

pub fn run_result(trained: &TrainedDetector, seed: u64, summary: ApSummary) -> RunResult {
    RunResult {
        seed,
        summary,
        trainable_params: trained.report.trainable_params,
        step_time_ms: trained.report.step_time_ms,
    }
}

/// Mean and spread of several runs over the same split.
pub fn aggregate(split: &VocabularySplit, runs: Vec<RunResult>) -> EvalReport {
    let col = |f: &dyn Fn(&ApSummary) -> f64| Stat::of(&runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
    let n = split.num_categories();
    let per_category = (0..n)
        .map(|c| {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.summary.per_category[c]).collect();
            (!v.is_empty()).then(|| Stat::of(&v).mean)
        })
        .collect();
    let k = runs.len().max(1) as f64;
    EvalReport {
        categories: split.all_categories.clone(),
        novel_ids: split.novel_ids.iter().copied().collect(),
        per_category,
        ap_novel: col(&|s| s.ap_novel),
        ap_base: col(&|s| s.ap_base),
        ap_all: col(&|s| s.ap_all),
        ap50: col(&|s| s.ap50),
        ap75: col(&|s| s.ap75),
        run_seeds: runs.iter().map(|r| r.seed).collect(),
        trainable_params: runs.first().map_or(0, |r| r.trainable_params),
        step_time_ms: runs.iter().map(|r| r.step_time_ms).sum::<f64>() / k,
        runs,
    }
}

/// Evaluate already trained runs (`(seed, model)`) on `dataset`.
pub fn evaluate(
    models: &[(u64, &TrainedDetector)],
    dataset: &DetectionDataset,
    vocab: &VocabularyEmbedding,
    params: &FusionParams,
) -> Result<EvalReport> {
    if vocab.names != dataset.categories() {
        return Err(Error::Vocabulary("vocabulary names do not match the dataset categories".into()));
    }
    let split = &dataset.split;
    let mut runs = Vec::with_capacity(models.len());
    for &(seed, m) in models {
        let fuser = Fuser::new(params, &split.base_ids, &split.novel_ids)?;
        let raws = predict_dataset(m, dataset, vocab)?;
        runs.push(run_result(m, seed, score_predictions(&raws, dataset, split, &fuser)?));
    }
    Ok(aggregate(split, runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub beta: f64,
    pub report: EvalReport,
    /// Times the base-category weight was consulted (0 by construction).
    pub alpha_reads: usize,
    pub model_hash_before: String,
    pub model_hash_after: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_digest_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_digest_after: Option<String>,
}

fn model_hash(m: &TrainedDetector) -> String {
    format!("{}:{}", m.vlm.checksum(), m.detector.store.checksum())
}

/// Transfer by vocabulary swap: embed the alternate dataset's names, treat
/// every category as novel (beta only) and evaluate without any training.
/// Fails if the model or its checkpoint directory changed.
pub fn evaluate_transfer(
    models: &[(u64, &TrainedDetector)],
    checkpoint_dirs: &[&Path],
    dataset: &DetectionDataset,
    params: &FusionParams,
    beta: f64,
) -> Result<TransferReport> {
    let digest = || -> Result<Option<String>> {
        if checkpoint_dirs.is_empty() {
            return Ok(None);
        }
        let all: Vec<String> = checkpoint_dirs.iter().map(|d| dir_digest(d)).collect::<Result<_>>()?;
        Ok(Some(all.join(":")))
    };
    let hash = || models.iter().map(|(_, m)| model_hash(m)).collect::<Vec<_>>().join(",");
    let (model_hash_before, checkpoint_digest_before) = (hash(), digest()?);
    let names = dataset.categories().to_vec();
    let transfer_params = FusionParams { beta, ..params.clone() };
    let mut runs = Vec::with_capacity(models.len());
    let mut alpha_reads = 0;
    let mut split = None;
    for &(seed, m) in models {
        let (vocab, s) = swap_vocabulary(&m.vlm, &names, &PROMPT_TEMPLATES)?;
        let fuser = Fuser::new(&transfer_params, &s.base_ids, &s.novel_ids)?;
        let raws = predict_dataset(m, dataset, &vocab)?;
        runs.push(run_result(m, seed, score_predictions(&raws, dataset, &s, &fuser)?));
        alpha_reads += fuser.alpha_reads();
        split = Some(s);
    }
    let split = split.ok_or_else(|| Error::Invalid("no models to evaluate".into()))?;
    let (model_hash_after, checkpoint_digest_after) = (hash(), digest()?);
    if model_hash_after != model_hash_before || checkpoint_digest_after != checkpoint_digest_before {
        return Err(Error::Invalid("model parameters changed during transfer evaluation".into()));
    }
    Ok(TransferReport {
        beta,
        report: aggregate(&split, runs),
        alpha_reads,
        model_hash_before,
        model_hash_after,
        checkpoint_digest_before,
        checkpoint_digest_after,
    })
}
