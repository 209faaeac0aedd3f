//! Frozen-feature diagnostics: k-means structure of the top-level grid and
//! zero-shot classification of ground-truth regions.

mod kmeans;
mod purity;

use serde::{Deserialize, Serialize};

use crate::config::ProbeConfig;
use crate::error::Result;
use crate::fusion::vlm_region_scores;
use crate::image::RgbImage;
use crate::seed::derive_seed;
use crate::synthdata::{DetectionDataset, DetectionSample};
use crate::vlm::{VlmModel, VocabularyEmbedding};

pub use kmeans::{kmeans, kmeans_cluster, ClusterMap};
pub use purity::{cluster_purity, instance_labels, shuffled_purity};

/// Margin over the shuffled baseline an image must reach to count as
/// well-clustered.
pub const PURITY_MARGIN: f64 = 0.15;
const SHUFFLE_TRIALS: usize = 20;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionAccuracy {
    pub base_correct: usize,
    pub base_total: usize,
    pub novel_correct: usize,
    pub novel_total: usize,
}

impl RegionAccuracy {
    pub fn base(&self) -> f64 {
        self.base_correct as f64 / self.base_total.max(1) as f64
    }

    pub fn novel(&self) -> f64 {
        self.novel_correct as f64 / self.novel_total.max(1) as f64
    }
}

/// Top-1 zero-shot classification of every ground-truth box with VLM region
/// scores (background excluded from the argmax), split by base/novel.
pub fn gt_region_classification(
    vlm: &VlmModel<f32>,
    dataset: &DetectionDataset,
    vocab: &VocabularyEmbedding,
    temperature: f32,
) -> Result<RegionAccuracy> {
    let mut acc = RegionAccuracy::default();
    for s in &dataset.samples {
        if s.annotations.is_empty() {
            continue;
        }
        let grids = vlm.encode_image(&s.image)?;
        let boxes: Vec<_> = s.annotations.iter().map(|a| a.bbox).collect();
        let w = vlm_region_scores(vlm, &grids[2], &boxes, vocab, temperature)?;
        for (a, p) in s.annotations.iter().zip(&w) {
            let best = (1..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j]).then(j.cmp(&i))).unwrap();
            let hit = usize::from(best == a.category_id);
            if dataset.split.is_novel(a.category_id) {
                acc.novel_correct += hit;
                acc.novel_total += 1;
            } else {
                acc.base_correct += hit;
                acc.base_total += 1;
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageProbe {
    pub image_id: usize,
    pub purity: f64,
    pub shuffled_purity: f64,
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub k: usize,
    pub normalized: bool,
    pub images: Vec<ImageProbe>,
    pub mean_purity: f64,
    pub mean_shuffled_purity: f64,
    /// Fraction of images whose purity beats the shuffled baseline by at
    /// least `PURITY_MARGIN`.
    pub fraction_above_margin: f64,
    pub region_accuracy: RegionAccuracy,
}

/// Cluster one image's top-level grid and score it against its instances.
pub fn probe_image(vlm: &VlmModel<f32>, sample: &DetectionSample, cfg: &ProbeConfig, seed: u64) -> Result<(ImageProbe, ClusterMap, Vec<usize>)> {
    let grids = vlm.encode_image(&sample.image)?;
    let top = &grids[2];
    let k = cfg.k.min(top.height() * top.width());
    let map = kmeans_cluster(top, k, derive_seed(seed, "probe-kmeans", sample.id as u64), cfg.max_iters, cfg.normalize)?;
    let labels = instance_labels(&sample.annotations, sample.image.width, sample.image.height, top.width(), top.height());
    let probe = ImageProbe {
        image_id: sample.id,
        purity: cluster_purity(&map.assignments, &labels),
        shuffled_purity: shuffled_purity(&map.assignments, &labels, SHUFFLE_TRIALS, derive_seed(seed, "probe-shuffle", sample.id as u64)),
        inertia: map.inertia,
    };
    Ok((probe, map, labels))
}

/// Probe the first `cfg.images` samples of `dataset`.
pub fn probe_dataset(
    vlm: &VlmModel<f32>,
    dataset: &DetectionDataset,
    vocab: &VocabularyEmbedding,
    cfg: &ProbeConfig,
    temperature: f32,
    seed: u64,
) -> Result<ProbeReport> {
    let subset = dataset.head(cfg.images);
    let images: Vec<ImageProbe> = subset
        .samples
        .iter()
        .map(|s| probe_image(vlm, s, cfg, seed).map(|p| p.0))
        .collect::<Result<_>>()?;
    let n = images.len().max(1) as f64;
    Ok(ProbeReport {
        k: cfg.k,
        normalized: cfg.normalize,
        mean_purity: images.iter().map(|i| i.purity).sum::<f64>() / n,
        mean_shuffled_purity: images.iter().map(|i| i.shuffled_purity).sum::<f64>() / n,
        fraction_above_margin: images.iter().filter(|i| i.purity - i.shuffled_purity >= PURITY_MARGIN).count() as f64 / n,
        images,
        region_accuracy: gt_region_classification(vlm, &subset, vocab, temperature)?,
    })
}

fn color(i: usize) -> [u8; 3] {
    const P: [[u8; 3]; 8] = [
        [40, 40, 40],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    let c = P[i % P.len()];
    let shade = (i / P.len()) as u8 * 40;
    c.map(|v| v.saturating_sub(shade))
}

/// Side by side: the input, the cluster map and the instance labels, both
/// upsampled to the image size.
pub fn probe_visualization(image: &RgbImage, map: &ClusterMap, labels: &[usize]) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let mut out = RgbImage::new(3 * w, h);
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, image.get(x, y));
            let cell = (y * map.height / h) * map.width + x * map.width / w;
            out.put(w + x, y, color(map.assignments[cell] + 1));
            out.put(2 * w + x, y, color(labels[cell]));
        }
    }
    out
}
