use rand::Rng;

use crate::autograd::Var;
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

/// Shared 3x3 conv, then per-anchor objectness logits and box deltas.
#[derive(Clone, Copy, Debug)]
pub struct RpnHead {
    conv: Conv2d,
    objectness: Conv2d,
    deltas: Conv2d,
}

fn small_init<R: Real>(store: &mut ParamStore<R>, conv: &Conv2d, rng: &mut impl Rng, std: f64) {
    let shape = store.value(conv.w).shape().to_vec();
    store.set(conv.w, crate::nn::normal_tensor(rng, &shape, std));
}

impl RpnHead {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, channels: usize, anchors_per_cell: usize) -> Self {
        let conv = Conv2d::new(store, rng, "rpn.conv", channels, channels, 3, 1, 1, true);
        let objectness = Conv2d::new(store, rng, "rpn.objectness", channels, anchors_per_cell, 1, 1, 0, true);
        let deltas = Conv2d::new(store, rng, "rpn.deltas", channels, 4 * anchors_per_cell, 1, 1, 0, true);
        small_init(store, &objectness, rng, 0.01);
        small_init(store, &deltas, rng, 0.01);
        Self {
            conv,
            objectness,
            deltas,
        }
    }

    /// Objectness `[B, H, W, A]` and deltas `[B, H, W, 4A]` of one level.
    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, level: &Var<'a, R>) -> (Var<'a, R>, Var<'a, R>) {
        let h = self.conv.forward(ctx, level).relu();
        (self.objectness.forward(ctx, &h), self.deltas.forward(ctx, &h))
    }
}

/// Two-layer MLP from 7x7 ROI features to the region embedding r_b, the
/// class-agnostic box regressor on r_b, and the classifier temperature.
#[derive(Clone, Copy, Debug)]
pub struct BoxHead {
    fc1: Linear,
    fc2: Linear,
    regressor: Linear,
    /// `ln(tau)`.
    pub log_tau: usize,
}

impl BoxHead {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        channels: usize,
        roi_size: usize,
        hidden: usize,
        embed_dim: usize,
        init_tau: f64,
    ) -> Self {
        let fc1 = Linear::new(store, rng, "box.fc1", roi_size * roi_size * channels, hidden, true);
        let fc2 = Linear::with_std(store, rng, "box.fc2", hidden, embed_dim, true, (1.0 / hidden as f64).sqrt());
        let regressor = Linear::with_std(store, rng, "box.regressor", embed_dim, 4, true, 0.0);
        let log_tau = store.add("box.log_tau", Tensor::scalar(R::from_f64_lossy(init_tau.ln())));
        Self {
            fc1,
            fc2,
            regressor,
            log_tau,
        }
    }

    /// Region embeddings `[R, D]` of ROI features `[R, S, S, C]`.
    pub fn embed<'a, R: Real>(&self, ctx: &Ctx<'a, R>, rois: &Var<'a, R>) -> Var<'a, R> {
        let s = rois.shape();
        let flat = rois.reshape(&[s[0], s[1] * s[2] * s[3]]);
        self.fc2.forward(ctx, &self.fc1.forward(ctx, &flat).relu())
    }

    /// Box deltas `[R, 4]`, one per region whatever the vocabulary.
    pub fn deltas<'a, R: Real>(&self, ctx: &Ctx<'a, R>, embedding: &Var<'a, R>) -> Var<'a, R> {
        self.regressor.forward(ctx, embedding)
    }

    /// `cos(r_b, t_c) / tau` for every vocabulary row `t_c` (rows of `vocab`
    /// are unit vectors).
    pub fn logits<'a, R: Real>(&self, ctx: &Ctx<'a, R>, embedding: &Var<'a, R>, vocab: &Var<'a, R>) -> Var<'a, R> {
        let inv_tau = ctx.p(self.log_tau).neg().exp();
        embedding.l2_normalize().matmul_t(vocab, false, true).mul_scalar(&inv_tau)
    }
}

/// 14x14 ROI features to 28x28 mask logits, one mask per region.
#[derive(Clone, Copy, Debug)]
pub struct MaskHead {
    conv: Conv2d,
    expand: Linear,
    predictor: Conv2d,
}

impl MaskHead {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, channels: usize, hidden: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, "mask.conv", channels, hidden, 3, 1, 1, true),
            expand: Linear::new(store, rng, "mask.expand", hidden, 4 * hidden, true),
            predictor: Conv2d::new(store, rng, "mask.predictor", hidden, 1, 1, 1, 0, true),
        }
    }

    /// `[R, S, S, C]` -> `[R, 2S, 2S]` logits.
    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, rois: &Var<'a, R>) -> Var<'a, R> {
        let s = rois.shape();
        let h = self.conv.forward(ctx, rois).relu();
        let up = self.expand.forward(ctx, &h).depth_to_space2x().relu();
        self.predictor.forward(ctx, &up).reshape(&[s[0], 2 * s[1], 2 * s[2]])
    }
}
