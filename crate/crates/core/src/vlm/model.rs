use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, StoreSection};
use crate::error::{Error, Result};
use crate::image::{to_batch, RgbImage};
use crate::nn::{normal_tensor, BatchNorm, Conv2d, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::seed::rng;
use crate::tensor::{Real, Tensor};

use super::tokenizer::{Tokenizer, PAD};

/// Total stride of the image encoder.
pub const TOP_STRIDE: usize = 32;
/// Strides of the grids returned by the image encoder.
pub const FEATURE_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    /// Pretraining resolution; fixes the pooler grid at `image_size / 32`.
    pub image_size: usize,
    /// Channels of the stride-4, -8 and -16 stages.
    pub widths: [usize; 3],
    /// Embedding width D (also the stride-32 stage width).
    pub embed_dim: usize,
    pub pool_heads: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub max_len: usize,
    pub init_temperature: f64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            widths: [32, 64, 128],
            embed_dim: 128,
            pool_heads: 4,
            text_width: 64,
            text_layers: 2,
            text_heads: 2,
            text_ffn: 128,
            max_len: 32,
            init_temperature: 0.07,
        }
    }
}

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 1.0;

impl VlmConfig {
    pub fn pool_grid(&self) -> usize {
        self.image_size / TOP_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % TOP_STRIDE != 0 {
            return Err(Error::Config(format!(
                "vlm.image_size {} must be a positive multiple of {TOP_STRIDE}",
                self.image_size
            )));
        }
        if self.embed_dim % self.pool_heads != 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::Config("attention heads must divide the widths".into()));
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.init_temperature) {
            return Err(Error::Config("vlm.init_temperature outside [0.01, 1]".into()));
        }
        Ok(())
    }
}

/// Dense feature map `[H, W, C]` from one encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<R: Real = f32> {
    pub values: Tensor<R>,
    pub stride: usize,
    pub stage_id: usize,
}

impl<R: Real> FeatureGrid<R> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    pre: Option<(Conv2d, BatchNorm)>,
    down: Conv2d,
    down_bn: BatchNorm,
    res: Option<(Conv2d, BatchNorm)>,
}

impl Stage {
    fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, x: &Var<'a, R>) -> Var<'a, R> {
        let x = match &self.pre {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)).relu(),
            None => x.clone(),
        };
        let h = self.down_bn.forward(ctx, &self.down.forward(ctx, &x)).relu();
        match &self.res {
            Some((conv, bn)) => h.add(&bn.forward(ctx, &conv.forward(ctx, &h)).relu()),
            None => h,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pooler {
    ln: LayerNorm,
    pos: usize,
    attn: MultiHeadAttention,
    grid: usize,
}

#[derive(Clone, Copy, Debug)]
struct TextLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct TextEncoder {
    embed: usize,
    pos: usize,
    layers: Vec<TextLayer>,
    ln_final: LayerNorm,
    proj: Linear,
}

/// The vision-language model: image encoder F, attention pooler P, text
/// encoder and contrastive temperature, all in one parameter store.
pub struct VlmModel<R: Real = f32> {
    pub config: VlmConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore<R>,
    stages: [Stage; 4],
    pooler: Pooler,
    text: TextEncoder,
    /// Index of `ln(1 / temperature)`.
    logit_scale: usize,
}

impl<R: Real> Clone for VlmModel<R> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            store: self.store.clone(),
            stages: self.stages,
            pooler: self.pooler,
            text: self.text.clone(),
            logit_scale: self.logit_scale,
        }
    }
}

/// Parameter-name prefixes of the three model parts.
pub const IMAGE_PREFIX: &str = "image.";
pub const POOL_PREFIX: &str = "pool.";
pub const TEXT_PREFIX: &str = "text.";

impl<R: Real> VlmModel<R> {
    pub fn new(config: VlmConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let [w0, w1, w2] = config.widths;
        let d = config.embed_dim;
        let half = (w0 / 2).max(1);
        let stem = Stage {
            pre: Some((
                Conv2d::new(&mut s, &mut r, "image.stem1", 3, half, 3, 2, 1, false),
                BatchNorm::new(&mut s, "image.stem1.bn", half),
            )),
            down: Conv2d::new(&mut s, &mut r, "image.stem2", half, w0, 3, 2, 1, false),
            down_bn: BatchNorm::new(&mut s, "image.stem2.bn", w0),
            res: None,
        };
        let mut stage = |s: &mut ParamStore<R>, name: &str, cin: usize, cout: usize| Stage {
            pre: None,
            down: Conv2d::new(s, &mut r, &format!("{name}.down"), cin, cout, 3, 2, 1, false),
            down_bn: BatchNorm::new(s, &format!("{name}.down.bn"), cout),
            res: Some((
                Conv2d::new(s, &mut r, &format!("{name}.res"), cout, cout, 3, 1, 1, false),
                BatchNorm::new(s, &format!("{name}.res.bn"), cout),
            )),
        };
        let s2 = stage(&mut s, "image.s8", w0, w1);
        let s3 = stage(&mut s, "image.s16", w1, w2);
        let s4 = stage(&mut s, "image.s32", w2, d);

        let g = config.pool_grid();
        let pooler = Pooler {
            ln: LayerNorm::new(&mut s, "pool.ln", d),
            pos: s.add("pool.pos", normal_tensor(&mut r, &[g * g + 1, d], (1.0 / d as f64).sqrt())),
            attn: MultiHeadAttention::new(&mut s, &mut r, "pool.attn", d, d, config.pool_heads),
            grid: g,
        };

        let tw = config.text_width;
        let embed = s.add(
            "text.embed",
            normal_tensor(&mut r, &[tokenizer.vocab_size(), tw], 0.1),
        );
        let pos = s.add("text.pos", normal_tensor(&mut r, &[config.max_len, tw], 0.1));
        let layers = (0..config.text_layers)
            .map(|l| {
                let n = format!("text.layer{l}");
                TextLayer {
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), tw),
                    attn: MultiHeadAttention::new(&mut s, &mut r, &format!("{n}.attn"), tw, tw, config.text_heads),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), tw),
                    fc1: Linear::new(&mut s, &mut r, &format!("{n}.fc1"), tw, config.text_ffn, true),
                    fc2: Linear::with_std(
                        &mut s,
                        &mut r,
                        &format!("{n}.fc2"),
                        config.text_ffn,
                        tw,
                        true,
                        (1.0 / config.text_ffn as f64).sqrt(),
                    ),
                }
            })
            .collect();
        let text = TextEncoder {
            embed,
            pos,
            layers,
            ln_final: LayerNorm::new(&mut s, "text.ln_final", tw),
            proj: Linear::with_std(&mut s, &mut r, "text.proj", tw, d, false, (1.0 / tw as f64).sqrt()),
        };
        let logit_scale = s.add(
            "logit_scale",
            Tensor::scalar(R::from_f64_lossy((1.0 / config.init_temperature).ln())),
        );
        Ok(Self {
            config,
            tokenizer,
            store: s,
            stages: [stem, s2, s3, s4],
            pooler,
            text,
            logit_scale,
        })
    }

    /// Image-encoder stage outputs at strides 8, 16 and 32 for an NHWC batch
    /// of normalized pixels.
    pub fn image_features<'a>(&self, ctx: &Ctx<'a, R>, x: &Var<'a, R>) -> Result<Vec<Var<'a, R>>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != 3 || s[1] % TOP_STRIDE != 0 || s[2] % TOP_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "image batch {s:?}: sides must be multiples of {TOP_STRIDE} with 3 channels"
            )));
        }
        let mut h = self.stages[0].forward(ctx, x);
        let mut out = Vec::with_capacity(3);
        for st in &self.stages[1..] {
            h = st.forward(ctx, &h);
            out.push(h);
        }
        Ok(out)
    }

    /// Attention pooling of `[B, G, G, D]` grids to `[B, D]` (not normalized).
    pub fn pool<'a>(&self, ctx: &Ctx<'a, R>, grid: &Var<'a, R>) -> Result<Var<'a, R>> {
        let s = grid.shape();
        let (g, d) = (self.pooler.grid, self.config.embed_dim);
        if s.len() != 4 || s[1] != g || s[2] != g || s[3] != d {
            return Err(Error::Shape(format!(
                "pooler expects [B, {g}, {g}, {d}] grids, got {s:?}"
            )));
        }
        let b = s[0];
        let t = g * g;
        let tokens = self.pooler.ln.forward(ctx, &grid.reshape(&[b, t, d]));
        let mean = tokens.mean_axis(1).reshape(&[b, 1, d]);
        let seq = Var::concat(&[mean, tokens], 1);
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..t + 1).collect();
        let pos = ctx.p(self.pooler.pos).gather_rows(&idx).reshape(&[b, t + 1, d]);
        let seq = seq.add(&pos);
        let query = seq.slice(1, 0, 1);
        let out = self.pooler.attn.forward(ctx, &query, &seq, None);
        Ok(out.reshape(&[b, d]))
    }

    /// Text embeddings `[B, D]` (not normalized) of token sequences.
    pub fn text_features<'a>(&self, ctx: &Ctx<'a, R>, texts: &[Vec<u32>]) -> Result<Var<'a, R>> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Tokenizer("empty token sequence".into()));
        }
        let b = texts.len();
        let l = texts.iter().map(|t| t.len()).max().unwrap().min(self.config.max_len);
        let w = self.config.text_width;
        let mut ids = Vec::with_capacity(b * l);
        let mut mask = Tensor::zeros(&[b, l]);
        let mut pool_w = Tensor::zeros(&[b, 1, l]);
        for (bi, t) in texts.iter().enumerate() {
            let n = t.len().min(l);
            for j in 0..l {
                ids.push(if j < n { t[j] as usize } else { PAD as usize });
                if j >= n {
                    mask.data_mut()[bi * l + j] = R::from_f64_lossy(-1e9);
                } else {
                    pool_w.data_mut()[bi * l + j] = R::one() / R::from_usize(n).unwrap();
                }
            }
        }
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let x = ctx.p(self.text.embed).gather_rows(&ids).reshape(&[b, l, w]);
        let mut x = x.add(&ctx.p(self.text.pos).gather_rows(&pos_idx).reshape(&[b, l, w]));
        for layer in &self.text.layers {
            let h = layer.ln1.forward(ctx, &x);
            x = x.add(&layer.attn.forward(ctx, &h, &h, Some(&mask)));
            let h = layer.ln2.forward(ctx, &x);
            x = x.add(&layer.fc2.forward(ctx, &layer.fc1.forward(ctx, &h).relu()));
        }
        let x = self.text.ln_final.forward(ctx, &x);
        let pooled = ctx.tape.constant(pool_w).matmul(&x).reshape(&[b, w]);
        Ok(self.text.proj.forward(ctx, &pooled))
    }

    /// `exp(logit_scale) = 1 / temperature` as a tape variable.
    pub fn logit_scale<'a>(&self, ctx: &Ctx<'a, R>) -> Var<'a, R> {
        ctx.p(self.logit_scale).exp()
    }

    pub fn logit_scale_index(&self) -> usize {
        self.logit_scale
    }

    pub fn temperature(&self) -> f64 {
        (-self.store.value(self.logit_scale).data()[0].to_f64_lossy()).exp()
    }

    /// Keep the temperature inside `[0.01, 1]`.
    pub fn clamp_temperature(&mut self) {
        let v = &mut self.store.value_mut(self.logit_scale).data_mut()[0];
        let (lo, hi) = ((1.0 / MAX_TEMPERATURE).ln(), (1.0 / MIN_TEMPERATURE).ln());
        *v = R::from_f64_lossy(v.to_f64_lossy().clamp(lo, hi));
    }

    /// Indices of trainable image-encoder parameters (the feature extractor F).
    pub fn image_param_indices(&self) -> Vec<usize> {
        (0..self.store.len())
            .filter(|&i| self.store.is_trainable(i) && self.store.name(i).starts_with(IMAGE_PREFIX))
            .collect()
    }

    /// Stage outputs of a normalized NHWC batch, without gradients.
    pub fn backbone(&self, batch: Tensor<R>) -> Result<Vec<Tensor<R>>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let x = tape.constant(batch);
        let feats = self.image_features(&ctx, &x)?;
        Ok(feats.iter().map(|v| (*v.value()).clone()).collect())
    }

    /// F(·) on one image: grids at strides 8, 16, 32.
    pub fn encode_image(&self, image: &RgbImage) -> Result<Vec<FeatureGrid<R>>> {
        let feats = self.backbone(to_batch(&[image])?)?;
        Ok(feats
            .into_iter()
            .zip(FEATURE_STRIDES)
            .enumerate()
            .map(|(i, (t, stride))| {
                let s = t.shape()[1..].to_vec();
                FeatureGrid {
                    values: t.reshape(&s),
                    stride,
                    stage_id: i + 2,
                }
            })
            .collect())
    }

    /// P(·) on a batch of `[N, G, G, D]` grids; returns `[N, D]`.
    pub fn pool_grids(&self, grids: Tensor<R>) -> Result<Tensor<R>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let out = self.pool(&ctx, &tape.constant(grids))?;
        Ok((*out.value()).clone())
    }

    /// P(·) on one grid.
    pub fn attention_pool(&self, grid: &FeatureGrid<R>) -> Result<Vec<R>> {
        let mut shape = vec![1];
        shape.extend_from_slice(grid.values.shape());
        Ok(self.pool_grids(grid.values.clone().reshape(&shape))?.into_data())
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<R>> {
        let ids = self.tokenizer.encode(text, self.config.max_len)?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let out = self.text_features(&ctx, &[ids])?;
        Ok((*out.value()).clone().into_data())
    }
}

pub const VLM_KIND: &str = "vlm";

#[derive(Serialize, Deserialize)]
struct VlmManifestConfig {
    vlm: VlmConfig,
    vocab_size: usize,
}

impl VlmModel<f32> {
    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(VlmManifestConfig {
            vlm: self.config.clone(),
            vocab_size: self.tokenizer.vocab_size(),
        })
        .expect("config serializes");
        checkpoint::write_checkpoint(
            dir,
            VLM_KIND,
            &cfg,
            &[StoreSection {
                prefix: "",
                store: &self.store,
                frozen: false,
            }],
            serde_json::json!({ "tokenizer": self.tokenizer.words(), "checksum": self.checksum() }),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        let bad = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        if m.kind != VLM_KIND {
            return Err(bad(format!("expected a {VLM_KIND} checkpoint, found {}", m.kind)));
        }
        let cfg: VlmManifestConfig =
            serde_json::from_value(m.config.clone()).map_err(|e| bad(e.to_string()))?;
        let words: Vec<String> = serde_json::from_value(m.extra["tokenizer"].clone())
            .map_err(|e| bad(format!("tokenizer: {e}")))?;
        if words.len() != cfg.vocab_size {
            return Err(bad("tokenizer size does not match the config".into()));
        }
        let mut model = Self::new(cfg.vlm, Tokenizer::from_words(words), 0)?;
        checkpoint::load_section(dir, &m, "", &mut model.store)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VlmModel<f32> {
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
        VlmModel::new(cfg, Tokenizer::build(["a red circle", "a blue star"], &["background"]), 3).unwrap()
    }

    #[test]
    fn stride_arithmetic_and_finiteness() {
        let m = VlmModel::<f32>::new(
            VlmConfig::default(),
            Tokenizer::build(["a red circle"], &["background"]),
            1,
        )
        .unwrap();
        let img = RgbImage::new(128, 128);
        let grids = m.encode_image(&img).unwrap();
        let sizes: Vec<(usize, usize)> = grids.iter().map(|g| (g.height(), g.stride)).collect();
        assert_eq!(sizes, vec![(16, 8), (8, 16), (4, 32)]);
        assert!(grids.iter().all(|g| g.values.all_finite()));
        assert_eq!(grids, m.encode_image(&img).unwrap());
        assert!(m.encode_image(&RgbImage::new(100, 96)).is_err());
    }

    #[test]
    fn pooler_constant_grid_and_permutation() {
        let m = tiny();
        let g = m.config.pool_grid();
        let d = m.config.embed_dim;
        let zero = FeatureGrid {
            values: Tensor::zeros(&[g, g, d]),
            stride: 32,
            stage_id: 4,
        };
        assert!(m.attention_pool(&zero).unwrap().iter().all(|v| v.is_finite()));

        let mut r = rng(9);
        let random = FeatureGrid {
            values: normal_tensor::<f32>(&mut r, &[g, g, d], 1.0),
            stride: 32,
            stage_id: 4,
        };
        let mut swapped = random.clone();
        let (a, b) = swapped.values.data_mut().split_at_mut(d);
        a.swap_with_slice(&mut b[..d]);
        assert_ne!(m.attention_pool(&random).unwrap(), m.attention_pool(&swapped).unwrap());

        let wrong = FeatureGrid {
            values: Tensor::zeros(&[g + 1, g + 1, d]),
            stride: 32,
            stage_id: 4,
        };
        assert!(m.attention_pool(&wrong).is_err());
    }

    #[test]
    fn text_is_case_insensitive_and_deterministic() {
        let m = tiny();
        let a = m.encode_text("a red circle").unwrap();
        assert_eq!(a, m.encode_text("A Red CIRCLE").unwrap());
        assert_ne!(a, m.encode_text("a blue circle").unwrap());
        assert!(m.encode_text("   ").is_err());
    }

    #[test]
    fn padding_does_not_change_embeddings() {
        let m = tiny();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.store);
        let short = m.tokenizer.encode("red circle", 8).unwrap();
        let long = m.tokenizer.encode("a blue star and a red circle", 8).unwrap();
        let alone = m.text_features(&ctx, &[short.clone()]).unwrap().value();
        let batched = m.text_features(&ctx, &[long, short]).unwrap().value();
        let d = m.config.embed_dim;
        for (x, y) in alone.data().iter().zip(&batched.data()[d..]) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = VlmModel::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.tokenizer, m.tokenizer);
        assert!((back.temperature() - 0.07).abs() < 1e-6);
    }
}
