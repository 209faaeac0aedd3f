//! Parameter storage and the small set of layers the models are built from.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{ConvGeom, Tape, Var};
use crate::tensor::{Real, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Named parameter arrays plus non-trainable buffers (BatchNorm running
/// statistics). Values are shared `Arc`s so a loaded model can be read from
/// several threads and bound into a tape without copying.
pub struct ParamStore<R: Real> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<R>>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Clone for ParamStore<R> {
    /// Clones get a fresh identity so gradients of the copy never alias the
    /// original within one tape.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    fn insert(&mut self, name: &str, value: Tensor<R>, trainable: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let i = self.names.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>) -> usize {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<R>) -> usize {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<R> {
        &self.values[i]
    }

    pub fn value_arc(&self, i: usize) -> Arc<Tensor<R>> {
        self.values[i].clone()
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn set(&mut self, i: usize, value: Tensor<R>) {
        assert_eq!(
            value.shape(),
            self.values[i].shape(),
            "shape change for {}",
            self.names[i]
        );
        self.values[i] = Arc::new(value);
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        (0..self.len())
            .filter(|&i| self.trainable[i])
            .map(|i| self.values[i].len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_f32().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same parameters in another precision.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Names of parameters whose values differ bitwise from `other`.
    pub fn diff_names(&self, other: &ParamStore<R>) -> Vec<String> {
        self.names
            .iter()
            .enumerate()
            .filter(|(i, n)| match other.find(n) {
                Some(j) => self.values[*i].data() != other.values[j].data(),
                None => true,
            })
            .map(|(_, n)| n.clone())
            .collect()
    }
}

/// Running-statistics update produced by a training-mode BatchNorm.
pub struct BnStats<R> {
    pub mean_index: usize,
    pub var_index: usize,
    pub mean: Vec<R>,
    pub var: Vec<R>,
    pub momentum: f64,
}

/// Forward-pass context: which tape, which parameters, and whether the
/// parameters should collect gradients.
pub struct Ctx<'a, R: Real> {
    pub tape: &'a Tape<R>,
    pub store: &'a ParamStore<R>,
    pub train: bool,
    pub track_grads: bool,
    bn_updates: RefCell<Vec<BnStats<R>>>,
}

impl<'a, R: Real> Ctx<'a, R> {
    pub fn new(tape: &'a Tape<R>, store: &'a ParamStore<R>, train: bool, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            train,
            track_grads,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference: eval-mode layers, no gradients.
    pub fn eval(tape: &'a Tape<R>, store: &'a ParamStore<R>) -> Self {
        Self::new(tape, store, false, false)
    }

    pub fn p(&self, i: usize) -> Var<'a, R> {
        if self.track_grads && self.store.is_trainable(i) {
            self.tape.param(self.store, i)
        } else {
            self.tape.constant_arc(self.store.value_arc(i))
        }
    }

    pub fn take_bn_updates(&self) -> Vec<BnStats<R>> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Apply BatchNorm running-average updates to `store`.
pub fn apply_bn_updates<R: Real>(store: &mut ParamStore<R>, updates: Vec<BnStats<R>>) {
    for u in updates {
        let m = R::from_f64_lossy(u.momentum);
        let keep = R::one() - m;
        for (dst, &v) in store.value_mut(u.mean_index).data_mut().iter_mut().zip(&u.mean) {
            *dst = keep * *dst + m * v;
        }
        for (dst, &v) in store.value_mut(u.var_index).data_mut().iter_mut().zip(&u.var) {
            *dst = keep * *dst + m * v;
        }
    }
}

pub fn normal_tensor<R: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<R> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            R::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Self::with_std(store, rng, name, fan_in, fan_out, bias, std)
    }

    pub fn with_std<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            normal_tensor(rng, &[fan_in, fan_out], std),
        );
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, x: &Var<'a, R>) -> Var<'a, R> {
        let shape = x.shape();
        assert_eq!(*shape.last().unwrap(), self.fan_in, "linear input width");
        let rows = x.value().rows();
        let y = x.reshape(&[rows, self.fan_in]).matmul(&ctx.p(self.w));
        let y = match self.b {
            Some(b) => y.add_row(&ctx.p(b)),
            None => y,
        };
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = self.fan_out;
        y.reshape(&oshape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: Option<usize>,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let w = store.add(
            &format!("{name}.weight"),
            normal_tensor(rng, &[kernel, kernel, c_in, c_out], (2.0 / fan_in as f64).sqrt()),
        );
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            w,
            b,
            geom: ConvGeom {
                kernel,
                stride,
                pad,
            },
            c_in,
            c_out,
        }
    }

    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, x: &Var<'a, R>) -> Var<'a, R> {
        let y = x.conv2d(&ctx.p(self.w), self.geom);
        match self.b {
            Some(b) => y.add_row(&ctx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], R::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, x: &Var<'a, R>) -> Var<'a, R> {
        x.layer_norm(&ctx.p(self.gamma), &ctx.p(self.beta), 1e-5)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], R::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[dim], R::one()),
            ),
        }
    }

    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, x: &Var<'a, R>) -> Var<'a, R> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, mean, var) = x.batch_norm_train(&g, &b, BN_EPS);
            ctx.bn_updates.borrow_mut().push(BnStats {
                mean_index: self.running_mean,
                var_index: self.running_var,
                mean,
                var,
                momentum: BN_MOMENTUM,
            });
            y
        } else {
            let st = ctx.store;
            x.batch_norm_eval(
                &g,
                &b,
                st.value(self.running_mean).data(),
                st.value(self.running_var).data(),
                BN_EPS,
            )
        }
    }
}

/// Multi-head attention where queries may come from a subset of tokens.
/// The key projection has no bias: it would add the same logit to every key.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "heads must divide width");
        let std = (1.0 / dim as f64).sqrt();
        Self {
            q: Linear::with_std(store, rng, &format!("{name}.q"), dim, dim, true, std),
            k: Linear::with_std(store, rng, &format!("{name}.k"), dim, dim, false, std),
            v: Linear::with_std(store, rng, &format!("{name}.v"), dim, dim, true, std),
            out: Linear::with_std(store, rng, &format!("{name}.out"), dim, out_dim, true, std),
            heads,
            dim,
        }
    }

    /// `queries`: `[B, Tq, dim]`, `tokens`: `[B, T, dim]`, optional additive
    /// key mask `[B, T]` (0 or large negative). Returns `[B, Tq, out_dim]`.
    pub fn forward<'a, R: Real>(
        &self,
        ctx: &Ctx<'a, R>,
        queries: &Var<'a, R>,
        tokens: &Var<'a, R>,
        key_mask: Option<&Tensor<R>>,
    ) -> Var<'a, R> {
        let qs = queries.shape();
        let ts = tokens.shape();
        let (b, tq, t) = (qs[0], qs[1], ts[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |x: Var<'a, R>, len: usize| x.reshape(&[b, len, h, dh]).swap_axes_1_2();
        let q = split(self.q.forward(ctx, queries), tq);
        let k = split(self.k.forward(ctx, tokens), t);
        let v = split(self.v.forward(ctx, tokens), t);
        let scale = R::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let q = q.reshape(&[b * h, tq, dh]);
        let k = k.reshape(&[b * h, t, dh]);
        let v = v.reshape(&[b * h, t, dh]);
        let mut logits = q.matmul_t(&k, false, true).scale(scale);
        if let Some(mask) = key_mask {
            assert_eq!(mask.shape(), &[b, t], "key mask shape");
            let mut full = Tensor::zeros(&[b * h, tq, t]);
            for bi in 0..b {
                for hi in 0..h {
                    for qi in 0..tq {
                        let o = ((bi * h + hi) * tq + qi) * t;
                        full.data_mut()[o..o + t].copy_from_slice(mask.row(bi));
                    }
                }
            }
            logits = logits.add(&ctx.tape.constant(full));
        }
        let attn = logits.softmax();
        let mixed = attn
            .matmul(&v)
            .reshape(&[b, h, tq, dh])
            .swap_axes_1_2()
            .reshape(&[b, tq, self.dim]);
        self.out.forward(ctx, &mixed)
    }
}
