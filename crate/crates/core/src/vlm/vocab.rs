use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::checkpoint::{self, StoreSection};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::model::VlmModel;

/// Prompt templates averaged per category name.
pub const PROMPT_TEMPLATES: [&str; 7] = [
    "a photo of a {}",
    "an image of a {}",
    "a picture of a {}",
    "a drawing of a {}",
    "a {} in a scene",
    "there is a {}",
    "{}",
];

pub const BACKGROUND_PHRASE: &str = "background";

/// Category text embeddings with the background phrase in row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabularyEmbedding {
    pub names: Vec<String>,
    /// `[names.len() + 1, D]`
    pub matrix: Tensor<f32>,
    pub unit_normalized: bool,
}

impl VocabularyEmbedding {
    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    /// Background row plus the given 1-based category rows, in order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let mut data = self.row(0).to_vec();
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Self {
            names: ids.iter().map(|&i| self.names[i - 1].clone()).collect(),
            matrix: Tensor::new(&[ids.len() + 1, self.dim()], data),
            unit_normalized: self.unit_normalized,
        }
    }
}

pub(crate) fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Cosine similarity of a unit vector `v` with every vocabulary row.
pub fn cosine_logits(v: &[f32], vocab: &VocabularyEmbedding) -> Vec<f32> {
    vocab
        .matrix
        .data()
        .chunks(vocab.dim())
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `softmax(logits / t)`.
pub fn softmax_temperature(logits: &[f32], t: f32) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&l| ((l - m) / t).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn check_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Vocabulary("empty vocabulary".into()));
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if n.trim().is_empty() {
            return Err(Error::Vocabulary("blank category name".into()));
        }
        if !seen.insert(n.trim().to_lowercase()) {
            return Err(Error::Vocabulary(format!("duplicate category name {n:?}")));
        }
        if n.trim().eq_ignore_ascii_case(BACKGROUND_PHRASE) {
            return Err(Error::Vocabulary("\"background\" is reserved".into()));
        }
    }
    Ok(())
}

/// Per name: embed every template instance, normalize each, average and
/// renormalize. Row 0 is the normalized embedding of "background".
pub fn build_vocabulary_embeddings(
    model: &VlmModel<f32>,
    names: &[String],
    templates: &[&str],
) -> Result<VocabularyEmbedding> {
    check_names(names)?;
    if templates.is_empty() {
        return Err(Error::Vocabulary("at least one prompt template is required".into()));
    }
    let d = model.config.embed_dim;
    let mut data = model.encode_text(BACKGROUND_PHRASE)?;
    normalize(&mut data);
    for name in names {
        let mut acc = vec![0f32; d];
        for t in templates {
            let mut e = model.encode_text(&t.replace("{}", name))?;
            normalize(&mut e);
            acc.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= templates.len() as f32);
        normalize(&mut acc);
        data.extend(acc);
    }
    Ok(VocabularyEmbedding {
        names: names.to_vec(),
        matrix: Tensor::new(&[names.len() + 1, d], data),
        unit_normalized: true,
    })
}

const CACHE_KIND: &str = "vocabulary-embedding";

fn names_key(names: &[String], templates: &[&str]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update([0]);
    }
    h.update([1]);
    for t in templates {
        h.update(t.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// As `build_vocabulary_embeddings`, reusing `<cache_dir>/vocab-<key>` when
/// its recorded checkpoint hash matches `model`.
pub fn cached_vocabulary_embeddings(
    model: &VlmModel<f32>,
    names: &[String],
    templates: &[&str],
    cache_dir: Option<&Path>,
) -> Result<VocabularyEmbedding> {
    let Some(cache_dir) = cache_dir else {
        return build_vocabulary_embeddings(model, names, templates);
    };
    let key = names_key(names, templates);
    let dir = cache_dir.join(format!("vocab-{}", &key[..16]));
    let ckpt = model.checksum();
    if let Ok(m) = checkpoint::read_manifest(&dir) {
        let same_names = m.extra["names_hash"] == serde_json::json!(key);
        let same_ckpt = m.extra["checkpoint"] == serde_json::json!(ckpt);
        if m.kind == CACHE_KIND && same_names && same_ckpt {
            if let Some(entry) = m.entry("embeddings") {
                let matrix = checkpoint::read_array(&dir, entry)?;
                return Ok(VocabularyEmbedding {
                    names: names.to_vec(),
                    matrix,
                    unit_normalized: true,
                });
            }
        }
        log::warn!(
            "vocabulary cache {} was built for another checkpoint or vocabulary; recomputing",
            dir.display()
        );
    }
    let vocab = build_vocabulary_embeddings(model, names, templates)?;
    let mut store = ParamStore::new();
    store.add_buffer("embeddings", vocab.matrix.clone());
    checkpoint::write_checkpoint(
        &dir,
        CACHE_KIND,
        &serde_json::json!({ "dim": vocab.dim(), "rows": vocab.matrix.rows() }),
        &[StoreSection {
            prefix: "",
            store: &store,
            frozen: true,
        }],
        serde_json::json!({ "names_hash": key, "checkpoint": ckpt, "names": names }),
    )?;
    Ok(vocab)
}

/// Whole-image zero-shot scores: pool the top-level grid, cosine against
/// every vocabulary row, softmax at temperature `t`.
pub fn zero_shot_classify(
    model: &VlmModel<f32>,
    image: &RgbImage,
    vocab: &VocabularyEmbedding,
    t: f32,
) -> Result<Vec<f32>> {
    let grids = model.encode_image(image)?;
    let mut v = model.attention_pool(&grids[2])?;
    normalize(&mut v);
    Ok(softmax_temperature(&cosine_logits(&v, vocab), t))
}

#[cfg(test)]
mod tests {
    use super::super::model::VlmConfig;
    use super::super::tokenizer::Tokenizer;
    use super::*;

    fn model() -> VlmModel<f32> {
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
        let captions: Vec<String> = PROMPT_TEMPLATES
            .iter()
            .map(|t| t.replace("{}", "red circle blue star"))
            .collect();
        let tok = Tokenizer::build(captions.iter().map(|s| s.as_str()), &[BACKGROUND_PHRASE]);
        VlmModel::new(cfg, tok, 5).unwrap()
    }

    fn names() -> Vec<String> {
        vec!["red circle".into(), "blue star".into()]
    }

    #[test]
    fn single_template_and_duplicates() {
        let m = model();
        let v = build_vocabulary_embeddings(&m, &names(), &["a photo of a {}"]).unwrap();
        let mut direct = m.encode_text("a photo of a red circle").unwrap();
        normalize(&mut direct);
        for (a, b) in v.row(1).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6);
        }
        let once = build_vocabulary_embeddings(&m, &names(), &PROMPT_TEMPLATES).unwrap();
        let mut twice_t = PROMPT_TEMPLATES.to_vec();
        twice_t.extend(PROMPT_TEMPLATES);
        let twice = build_vocabulary_embeddings(&m, &names(), &twice_t).unwrap();
        assert!(once.matrix.max_abs_diff(&twice.matrix) < 1e-6);
        for i in 0..3 {
            let n: f32 = once.row(i).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(once.matrix.shape(), &[3, 8]);
    }

    #[test]
    fn rejects_collisions() {
        let m = model();
        let dup = vec!["red circle".to_string(), "Red Circle".to_string()];
        assert!(build_vocabulary_embeddings(&m, &dup, &PROMPT_TEMPLATES).is_err());
    }

    #[test]
    fn cache_hits_and_invalidates() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let a = cached_vocabulary_embeddings(&m, &names(), &PROMPT_TEMPLATES, Some(dir.path())).unwrap();
        let b = cached_vocabulary_embeddings(&m, &names(), &PROMPT_TEMPLATES, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        let mut other = m.clone();
        other.store.value_mut(0).data_mut()[0] += 1.0;
        other.store.value_mut(other.store.find("text.proj.weight").unwrap()).data_mut()[0] += 1.0;
        let c = cached_vocabulary_embeddings(&other, &names(), &PROMPT_TEMPLATES, Some(dir.path())).unwrap();
        assert_eq!(c, build_vocabulary_embeddings(&other, &names(), &PROMPT_TEMPLATES).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shot_is_a_distribution() {
        let m = model();
        let v = build_vocabulary_embeddings(&m, &names(), &PROMPT_TEMPLATES).unwrap();
        let p = zero_shot_classify(&m, &RgbImage::filled(64, 64, [200, 30, 30]), &v, 0.5).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        let u = softmax_temperature(&[0.3, 0.3, 0.3], 0.01);
        assert!(u.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-6));
    }
}
