use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Geometric,
    Arithmetic,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "arithmetic" => Ok(Self::Arithmetic),
            _ => Err(Error::Config(format!("unknown fusion kind {s:?} (geometric|arithmetic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    /// VLM weight for base categories.
    pub alpha: f64,
    /// VLM weight for novel categories.
    pub beta: f64,
    /// Fixed softmax temperature of the VLM scores.
    pub temperature: f64,
    pub kind: FusionKind,
    /// Per-class NMS IoU threshold.
    pub nms: f32,
    pub max_detections: usize,
    /// Predict masks for the kept detections.
    pub masks: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: 0.35,
            beta: 0.65,
            temperature: 0.01,
            kind: FusionKind::Geometric,
            nms: 0.5,
            max_detections: 300,
            masks: true,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("fusion.alpha and fusion.beta must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("fusion.temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms) {
            return Err(Error::Config("fusion.nms must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Combines detector scores z with VLM scores w per category. Counts how
/// often the base-category weight alpha is read.
#[derive(Debug)]
pub struct Fuser {
    params: FusionParams,
    /// Indexed by category id (index 0 unused).
    novel: Vec<bool>,
    alpha_reads: AtomicUsize,
}

impl Fuser {
    /// `base_ids` and `novel_ids` must partition `1..=n`.
    pub fn new(params: &FusionParams, base_ids: &BTreeSet<usize>, novel_ids: &BTreeSet<usize>) -> Result<Self> {
        params.validate()?;
        let n = base_ids.len() + novel_ids.len();
        let all: BTreeSet<usize> = base_ids.union(novel_ids).copied().collect();
        if all.len() != n || all != (1..=n).collect() {
            return Err(Error::Vocabulary("base and novel ids must partition the categories".into()));
        }
        let mut novel = vec![false; n + 1];
        for &i in novel_ids {
            novel[i] = true;
        }
        Ok(Self {
            params: params.clone(),
            novel,
            alpha_reads: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &FusionParams {
        &self.params
    }

    pub fn num_categories(&self) -> usize {
        self.novel.len() - 1
    }

    pub fn alpha_reads(&self) -> usize {
        self.alpha_reads.load(Ordering::Relaxed)
    }

    fn alpha(&self) -> f64 {
        self.alpha_reads.fetch_add(1, Ordering::Relaxed);
        self.params.alpha
    }

    /// Fused scores s: `s_0 = z_0`; for category i the geometric
    /// `z^(1-a) w^a` or arithmetic `(1-a) z + a w` mix, with `a = alpha` for
    /// base and `beta` for novel categories.
    pub fn fuse(&self, z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        if z.len() != w.len() || z.len() != self.novel.len() {
            return Err(Error::Shape(format!(
                "score vectors of length {} and {}, expected {}",
                z.len(),
                w.len(),
                self.novel.len()
            )));
        }
        let mut s = Vec::with_capacity(z.len());
        s.push(z[0]);
        for i in 1..z.len() {
            let a = if self.novel[i] { self.params.beta } else { self.alpha() };
            s.push(match self.params.kind {
                FusionKind::Geometric => z[i].powf(1.0 - a) * w[i].powf(a),
                FusionKind::Arithmetic => (1.0 - a) * z[i] + a * w[i],
            });
        }
        Ok(s)
    }
}

/// One-off fusion of a single pair of score vectors.
pub fn fuse_scores(
    z: &[f64],
    w: &[f64],
    params: &FusionParams,
    base_ids: &BTreeSet<usize>,
    novel_ids: &BTreeSet<usize>,
) -> Result<Vec<f64>> {
    Fuser::new(params, base_ids, novel_ids)?.fuse(z, w)
}

/// `softmax(logits / t)` in double precision.
pub fn softmax_t(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn params(alpha: f64, beta: f64) -> FusionParams {
        FusionParams {
            alpha,
            beta,
            ..Default::default()
        }
    }

    #[test]
    fn scalar_example() {
        let z = [0.1, 0.1, 0.8];
        let w = [0.3, 0.2, 0.5];
        let s = fuse_scores(&z, &w, &params(0.35, 0.65), &ids(&[1]), &ids(&[2])).unwrap();
        assert!((s[2] - 0.8f64.powf(0.35) * 0.5f64.powf(0.65)).abs() < 1e-12);
        assert!((s[2] - 0.5895).abs() < 1e-4);
        assert!((s[1] - 0.1f64.powf(0.65) * 0.2f64.powf(0.35)).abs() < 1e-12);
        assert_eq!(s[0].to_bits(), z[0].to_bits());
    }

    #[test]
    fn mismatches_are_rejected() {
        let p = FusionParams::default();
        assert!(fuse_scores(&[0.5, 0.5], &[0.5, 0.3, 0.2], &p, &ids(&[1]), &ids(&[])).is_err());
        assert!(fuse_scores(&[0.5, 0.5], &[0.5, 0.5], &p, &ids(&[1]), &ids(&[1])).is_err());
        assert!(Fuser::new(&p, &ids(&[1, 3]), &ids(&[])).is_err());
        assert!(Fuser::new(&params(1.5, 0.5), &ids(&[1]), &ids(&[])).is_err());
    }

    #[test]
    fn all_novel_never_reads_alpha() {
        let f = Fuser::new(&FusionParams::default(), &ids(&[]), &ids(&[1, 2, 3])).unwrap();
        f.fuse(&[0.1, 0.2, 0.3, 0.4], &[0.25; 4]).unwrap();
        assert_eq!(f.alpha_reads(), 0);
        let g = Fuser::new(&FusionParams::default(), &ids(&[2]), &ids(&[1, 3])).unwrap();
        g.fuse(&[0.1, 0.2, 0.3, 0.4], &[0.25; 4]).unwrap();
        assert_eq!(g.alpha_reads(), 1);
    }

    #[test]
    fn entropy_falls_with_temperature() {
        let logits = [0.1, 0.3, 0.25, -0.2];
        let h = |t: f64| -softmax_t(&logits, t).iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
        let hs: Vec<f64> = [0.04, 0.02, 0.01, 0.005].iter().map(|&t| h(t)).collect();
        assert!(hs.windows(2).all(|w| w[1] <= w[0]), "{hs:?}");
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fusion_identities_and_bounds(
            z in dist(6), w in dist(6), alpha in 0.0f64..=1.0, beta in 0.0f64..=1.0,
            mask in proptest::collection::vec(any::<bool>(), 5), arith in any::<bool>(),
        ) {
            let novel: BTreeSet<usize> = (1..=5).filter(|&i| mask[i - 1]).collect();
            let base: BTreeSet<usize> = (1..=5).filter(|&i| !mask[i - 1]).collect();
            let kind = if arith { FusionKind::Arithmetic } else { FusionKind::Geometric };
            let p = FusionParams { alpha, beta, kind, ..Default::default() };
            let s = fuse_scores(&z, &w, &p, &base, &novel).unwrap();
            prop_assert_eq!(s[0].to_bits(), z[0].to_bits());
            for i in 1..6 {
                prop_assert!(s[i] <= z[i].max(w[i]) + 1e-12);
                prop_assert!(s[i] >= z[i].min(w[i]) - 1e-12);
                prop_assert!((0.0..=1.0).contains(&s[i]));
            }
            let zero = FusionParams { alpha: 0.0, beta: 0.0, kind, ..Default::default() };
            let s0 = fuse_scores(&z, &w, &zero, &base, &novel).unwrap();
            prop_assert_eq!(&s0, &z);
            let one = FusionParams { alpha: 1.0, beta: 1.0, kind, ..Default::default() };
            let s1 = fuse_scores(&z, &w, &one, &base, &novel).unwrap();
            prop_assert_eq!(&s1[1..], &w[1..]);
            let half = vec![0.5; 6];
            let sh = fuse_scores(&half, &half, &p, &base, &novel).unwrap();
            prop_assert!(sh[1..].iter().all(|&x| (x - 0.5).abs() < 1e-15));
        }

        #[test]
        fn scaling_logits_keeps_the_argmax(logits in proptest::collection::vec(-1.0f64..1.0, 2..8), k in 0.1f64..10.0) {
            let a = softmax_t(&logits, 0.01);
            let scaled: Vec<f64> = logits.iter().map(|x| x * k).collect();
            let b = softmax_t(&scaled, 0.01);
            let am = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j]).then(j.cmp(&i))).unwrap();
            prop_assert_eq!(am(&a), am(&b));
        }
    }
}
