//! Seeded inputs shared by the benchmarks in `benches/`.

use fvlm::seed::rng;
use fvlm::vlm::FeatureGrid;
use fvlm::{BoxRegion, Tensor};
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
}

pub fn random_grid(side: usize, channels: usize, stride: usize, seed: u64) -> FeatureGrid<f32> {
    FeatureGrid {
        values: random_tensor(&[side, side, channels], seed),
        stride,
        stage_id: 3,
    }
}

/// `n` boxes inside a `size` x `size` image.
pub fn random_boxes(n: usize, size: f32, seed: u64) -> Vec<BoxRegion> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (r.gen_range(0.0..size * 0.8), r.gen_range(0.0..size * 0.8));
            let (w, h) = (r.gen_range(4.0..size * 0.2), r.gen_range(4.0..size * 0.2));
            BoxRegion::new(x, y, (x + w).min(size), (y + h).min(size))
        })
        .collect()
}

/// Per-row probability vectors of length `k`, flattened.
pub fn random_distributions(rows: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen()).collect()
}
