//! The miniature vision-language model: convolutional image encoder F,
//! attention pooler P, transformer text encoder, contrastive pretraining and
//! the category text-embedding cache.

mod contrastive;
mod model;
mod pretrain;
mod tokenizer;
mod vocab;

pub use contrastive::contrastive_loss;
pub use model::{
    FeatureGrid, VlmConfig, VlmModel, FEATURE_STRIDES, IMAGE_PREFIX, MAX_TEMPERATURE,
    MIN_TEMPERATURE, POOL_PREFIX, TEXT_PREFIX, TOP_STRIDE,
};
pub use pretrain::{
    caption_tokenizer, pretrain, single_object_set, zero_shot_accuracy, PretrainConfig,
    PretrainLog,
};
pub use tokenizer::{Tokenizer, PAD, UNK};
pub use vocab::{
    build_vocabulary_embeddings, cached_vocabulary_embeddings, cosine_logits,
    softmax_temperature, zero_shot_classify, VocabularyEmbedding, BACKGROUND_PHRASE,
    PROMPT_TEMPLATES,
};
pub(crate) use vocab::normalize;

use crate::autograd::Tape;
use crate::error::Result;
use crate::gradcheck::{check_store, GradCheckReport};
use crate::image::RgbImage;
use crate::nn::{normal_tensor, Ctx, ParamStore};
use crate::seed::rng;
use crate::tensor::Tensor;

/// Finite-difference check of the contrastive loss with respect to every
/// VLM parameter, on a D=8, B=3 model in double precision.
pub fn contrastive_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = VlmConfig {
        image_size: 32,
        widths: [3, 4, 6],
        embed_dim: 8,
        pool_heads: 2,
        text_width: 6,
        text_layers: 1,
        text_heads: 2,
        text_ffn: 8,
        max_len: 6,
        init_temperature: 0.5,
    };
    let tok = Tokenizer::build(["a red circle and a blue star", "there is a green cross"], &[BACKGROUND_PHRASE]);
    let mut model = VlmModel::<f64>::new(cfg, tok, seed)?;
    // Unit gamma and zero beta make the loss scale-invariant in early gammas.
    let mut r = rng(seed ^ 0xb0);
    for i in 0..model.store.len() {
        let name = model.store.name(i);
        if model.store.is_trainable(i) && (name.ends_with(".gamma") || name.ends_with(".beta")) {
            let shape = model.store.value(i).shape().to_vec();
            let noise: Tensor<f64> = normal_tensor(&mut r, &shape, 0.3);
            model.store.value_mut(i).add_assign(&noise);
        }
    }
    let images: Tensor<f64> = normal_tensor(&mut rng(seed ^ 0x5eed), &[3, 32, 32, 3], 1.0);
    let texts: Vec<Vec<u32>> = ["a red circle", "a blue star and a green cross", "there is a circle"]
        .iter()
        .map(|t| model.tokenizer.encode(t, 6))
        .collect::<Result<_>>()?;
    let loss_with = |store: &ParamStore<f64>, grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut m = model.clone();
        m.store = store.clone();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store, true, grads);
        let feats = m.image_features(&ctx, &tape.constant(images.clone()))?;
        let img = m.pool(&ctx, &feats[2])?.l2_normalize();
        let txt = m.text_features(&ctx, &texts)?.l2_normalize();
        let loss = contrastive_loss(&img, &txt, &m.logit_scale(&ctx))?;
        let value = loss.item();
        let g = if grads { tape.backward(loss).for_store(&m.store) } else { Vec::new() };
        Ok((value, g))
    };
    let (_, analytic) = loss_with(&model.store, true)?;
    Ok(check_store(&model.store, &analytic, 1e-6, &|s| {
        loss_with(s, false).expect("forward").0
    }))
}

/// Images as a normalized batch for the encoder.
pub fn image_batch(images: &[&RgbImage]) -> Result<Tensor<f32>> {
    crate::image::to_batch(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let report = contrastive_gradient_check(1).unwrap();
        assert!(report.per_param.len() > 20);
        let (name, err) = report.worst();
        assert!(err < 1e-6, "{name}: {err} {:?}", report.per_param);
    }
}
