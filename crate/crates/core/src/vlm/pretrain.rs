use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::image::{to_batch, RgbImage};
use crate::nn::{apply_bn_updates, Ctx};
use crate::optim::{clip_global_norm, AdamW, CosineSchedule};
use crate::seed::{derive_seed, rng};
use crate::synthdata::{generate_scene, Color, CaptionDataset, SceneConfig};

use super::contrastive::contrastive_loss;
use super::model::{VlmConfig, VlmModel};
use super::tokenizer::Tokenizer;
use super::vocab::{build_vocabulary_embeddings, zero_shot_classify, BACKGROUND_PHRASE, PROMPT_TEMPLATES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Random horizontal flips (captions carry no left/right words).
    pub flip: bool,
    /// Batches are built from runs of this many images whose captions share
    /// the same color multiset, so only shape tells them apart. 0 or 1 gives
    /// plain shuffled batches.
    pub group_size: usize,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2400,
            batch_size: 64,
            lr: 2e-3,
            warmup_steps: 150,
            weight_decay: 0.05,
            grad_clip: 5.0,
            flip: true,
            group_size: 8,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// `(step, mean loss since the previous entry, temperature)`
    pub curve: Vec<(usize, f64, f64)>,
    pub seconds: f64,
}

/// Sorted color words of a caption.
fn color_signature(caption: &str) -> Vec<&str> {
    let mut colors: Vec<&str> = caption
        .split_whitespace()
        .filter(|w| Color::ALL.iter().any(|c| c.name() == *w))
        .collect();
    colors.sort_unstable();
    colors
}

/// One epoch of sample indices: each color-signature group is shuffled and
/// cut into runs of `group_size`, and the runs are shuffled as a whole.
fn grouped_order(groups: &[Vec<usize>], group_size: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for g in groups {
        let mut g = g.clone();
        g.shuffle(r);
        runs.extend(g.chunks(group_size.max(1)).map(|c| c.to_vec()));
    }
    runs.shuffle(r);
    runs.concat()
}

/// Tokenizer over every caption plus the background phrase.
pub fn caption_tokenizer(dataset: &CaptionDataset) -> Tokenizer {
    Tokenizer::build(dataset.captions.iter().map(|s| s.as_str()), &[BACKGROUND_PHRASE])
}

/// Contrastive pretraining from a seeded initialization. `steps = 0` returns
/// the initialization.
pub fn pretrain(
    dataset: &CaptionDataset,
    vlm: &VlmConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(VlmModel<f32>, PretrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("caption dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain.batch_size must be positive".into()));
    }
    let mut model = VlmModel::<f32>::new(vlm.clone(), caption_tokenizer(dataset), derive_seed(seed, "vlm-init", 0))?;
    if let Some(im) = dataset.images.iter().find(|im| im.width != vlm.image_size || im.height != vlm.image_size) {
        return Err(Error::Config(format!(
            "caption image is {}x{}, vlm.image_size is {}",
            im.width, im.height, vlm.image_size
        )));
    }
    let tokens: Vec<Vec<u32>> = dataset
        .captions
        .iter()
        .map(|c| model.tokenizer.encode(c, vlm.max_len))
        .collect::<Result<_>>()?;
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = PretrainLog::default();
    let start = Instant::now();
    let n = dataset.len();
    let bsz = cfg.batch_size.min(n);
    let groups: Vec<Vec<usize>> = if cfg.group_size > 1 {
        let mut by_sig: BTreeMap<Vec<&str>, Vec<usize>> = BTreeMap::new();
        for (i, c) in dataset.captions.iter().enumerate() {
            by_sig.entry(color_signature(c)).or_default().push(i);
        }
        by_sig.into_values().collect()
    } else {
        vec![(0..n).collect()]
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    let mut aug = rng(derive_seed(seed, "vlm-augment", 0));
    let mut running = (0.0, 0usize);
    for step in 0..cfg.steps {
        if cursor + bsz > n {
            order = grouped_order(&groups, cfg.group_size, &mut rng(derive_seed(seed, "vlm-order", epoch)));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let flipped: Vec<RgbImage> = idx
            .iter()
            .map(|&i| {
                if cfg.flip && aug.gen_bool(0.5) {
                    dataset.images[i].hflip()
                } else {
                    dataset.images[i].clone()
                }
            })
            .collect();
        let refs: Vec<&RgbImage> = flipped.iter().collect();
        let batch = to_batch::<f32>(&refs)?;
        let texts: Vec<Vec<u32>> = idx.iter().map(|&i| tokens[i].clone()).collect();

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, true, true);
        let x = tape.constant(batch);
        let feats = model.image_features(&ctx, &x)?;
        let img = model.pool(&ctx, &feats[2])?.l2_normalize();
        let txt = model.text_features(&ctx, &texts)?.l2_normalize();
        let loss = contrastive_loss(&img, &txt, &model.logit_scale(&ctx))?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let mut grads = tape.backward(loss).for_store(&model.store);
        let bn = ctx.take_bn_updates();
        drop(ctx);
        apply_bn_updates(&mut model.store, bn);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model.store, &grads, sched.lr(step));
        model.clamp_temperature();
        if !model.store.all_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        running.0 += value;
        running.1 += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let mean = running.0 / running.1 as f64;
            log.curve.push((step + 1, mean, model.temperature()));
            log::info!("pretrain step {} loss {:.4} temperature {:.4}", step + 1, mean, model.temperature());
            running = (0.0, 0);
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Held-out single-object images with their 1-based category ids in
/// `config.category_names()`.
pub fn single_object_set(config: &SceneConfig, n: usize, seed: u64) -> Result<Vec<(RgbImage, usize)>> {
    let cfg = SceneConfig {
        max_objects: 1,
        ..config.clone()
    };
    let names = cfg.category_names();
    (0..n)
        .map(|i| {
            let (spec, image, _) = generate_scene(derive_seed(seed, "zero-shot", i as u64), &cfg)?;
            let name = spec.objects[0].category();
            let id = names.iter().position(|c| *c == name).unwrap() + 1;
            Ok((image, id))
        })
        .collect()
}

/// Top-1 accuracy of whole-image zero-shot classification over
/// `names` (background excluded from the argmax).
pub fn zero_shot_accuracy(
    model: &VlmModel<f32>,
    names: &[String],
    samples: &[(RgbImage, usize)],
) -> Result<f64> {
    let vocab = build_vocabulary_embeddings(model, names, &PROMPT_TEMPLATES)?;
    let mut correct = 0;
    for (image, id) in samples {
        let p = zero_shot_classify(model, image, &vocab, 0.01)?;
        let best = (1..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap();
        correct += usize::from(best == *id);
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}
