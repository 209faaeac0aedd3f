use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng;

/// Base/novel partition of a vocabulary. Ids are 1-based positions in
/// `all_categories` (0 is reserved for background).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularySplit {
    pub all_categories: Vec<String>,
    pub base_ids: BTreeSet<usize>,
    pub novel_ids: BTreeSet<usize>,
    pub seed: u64,
}

impl VocabularySplit {
    /// Every category is base.
    pub fn all_base(names: Vec<String>) -> Self {
        let base_ids = (1..=names.len()).collect();
        Self {
            all_categories: names,
            base_ids,
            novel_ids: BTreeSet::new(),
            seed: 0,
        }
    }

    /// Every category is novel (transfer evaluation).
    pub fn all_novel(names: Vec<String>) -> Self {
        let novel_ids = (1..=names.len()).collect();
        Self {
            all_categories: names,
            base_ids: BTreeSet::new(),
            novel_ids,
            seed: 0,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.all_categories.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.all_categories[id - 1]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.all_categories.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn is_novel(&self, id: usize) -> bool {
        self.novel_ids.contains(&id)
    }

    pub fn is_base(&self, id: usize) -> bool {
        self.base_ids.contains(&id)
    }

    /// Base and novel ids partition `1..=N`.
    pub fn validate(&self) -> Result<()> {
        let n = self.all_categories.len();
        if let Some(id) = self.base_ids.intersection(&self.novel_ids).next() {
            return Err(Error::Vocabulary(format!(
                "category {id} is both base and novel"
            )));
        }
        let union: BTreeSet<usize> = self.base_ids.union(&self.novel_ids).copied().collect();
        let expected: BTreeSet<usize> = (1..=n).collect();
        if union != expected {
            return Err(Error::Vocabulary(format!(
                "split covers {} of {} categories",
                union.len(),
                n
            )));
        }
        let distinct: BTreeSet<&String> = self.all_categories.iter().collect();
        if distinct.len() != n {
            return Err(Error::Vocabulary("duplicate category names".into()));
        }
        Ok(())
    }
}

/// `"<color words> <shape>"` -> (color, shape).
fn attributes(name: &str) -> (String, String) {
    match name.trim().rsplit_once(' ') {
        Some((c, s)) => (c.to_string(), s.to_string()),
        None => (String::new(), name.trim().to_string()),
    }
}

/// Even split of `k` over `keys` with the remainder going to a seeded
/// random subset.
fn quotas(keys: &[String], k: usize, r: &mut impl rand::Rng) -> BTreeMap<String, usize> {
    let n = keys.len();
    let mut order: Vec<&String> = keys.iter().collect();
    order.shuffle(r);
    order
        .into_iter()
        .enumerate()
        .map(|(i, key)| (key.clone(), k / n + usize::from(i < k % n)))
        .collect()
}

const MAX_ATTEMPTS: usize = 2000;

/// Choose `round(novel_fraction * |names|)` novel categories so that novel
/// counts per shape, and per color, differ by at most one, and no shape or
/// color is entirely novel.
pub fn split_vocabulary(names: &[String], novel_fraction: f64, seed: u64) -> Result<VocabularySplit> {
    if !(0.0..1.0).contains(&novel_fraction) {
        return Err(Error::Config(format!(
            "novel_fraction {novel_fraction} outside [0, 1)"
        )));
    }
    let n = names.len();
    let k = (novel_fraction * n as f64).round() as usize;
    let attrs: Vec<(String, String)> = names.iter().map(|s| attributes(s)).collect();
    let colors: Vec<String> = attrs.iter().map(|a| a.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let shapes: Vec<String> = attrs.iter().map(|a| a.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut r = rng(seed);
    let unsat = || {
        Error::Vocabulary(format!(
            "cannot hold out {k} of {n} categories without making a shape or color entirely novel"
        ))
    };
    let mut novel: Option<BTreeSet<usize>> = (k == 0).then(BTreeSet::new);
    for _ in 0..MAX_ATTEMPTS {
        if novel.is_some() {
            break;
        }
        let qc = quotas(&colors, k, &mut r);
        let qs = quotas(&shapes, k, &mut r);
        let feasible = colors.iter().all(|c| qc[c] < attrs.iter().filter(|a| &a.0 == c).count())
            && shapes.iter().all(|s| qs[s] < attrs.iter().filter(|a| &a.1 == s).count());
        if !feasible {
            return Err(unsat());
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut used_c: BTreeMap<&str, usize> = BTreeMap::new();
        let mut used_s: BTreeMap<&str, usize> = BTreeMap::new();
        let mut picked = BTreeSet::new();
        for i in order {
            let (c, s) = (&attrs[i].0, &attrs[i].1);
            let uc = used_c.entry(c).or_default();
            let us = used_s.entry(s).or_default();
            if *uc < qc[c] && *us < qs[s] {
                *uc += 1;
                *us += 1;
                picked.insert(i + 1);
            }
        }
        if picked.len() == k {
            novel = Some(picked);
        }
    }
    let novel_ids = novel.ok_or_else(unsat)?;
    let base_ids = (1..=n).filter(|i| !novel_ids.contains(i)).collect();
    let split = VocabularySplit {
        all_categories: names.to_vec(),
        base_ids,
        novel_ids,
        seed,
    };
    split.validate()?;
    Ok(split)
}

/// On-disk form: `{"base": [names], "novel": [names], "seed": n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub seed: u64,
}

impl SplitFile {
    pub fn from_split(split: &VocabularySplit) -> Self {
        Self {
            base: split.base_ids.iter().map(|&i| split.name(i).to_string()).collect(),
            novel: split.novel_ids.iter().map(|&i| split.name(i).to_string()).collect(),
            seed: split.seed,
        }
    }

    pub fn to_split(&self, categories: &[String]) -> Result<VocabularySplit> {
        let lookup = |name: &String| {
            categories
                .iter()
                .position(|c| c == name)
                .map(|i| i + 1)
                .ok_or_else(|| Error::Vocabulary(format!("split names unknown category {name:?}")))
        };
        let split = VocabularySplit {
            all_categories: categories.to_vec(),
            base_ids: self.base.iter().map(lookup).collect::<Result<_>>()?,
            novel_ids: self.novel.iter().map(lookup).collect::<Result<_>>()?,
            seed: self.seed,
        };
        split.validate()?;
        Ok(split)
    }
}
