use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use fvlm::autograd::{ConvGeom, Tape};
use fvlm::eval::average_precision;
use fvlm::fusion::{FusionParams, Fuser};
use fvlm::geometry::nms;
use fvlm::image::to_batch;
use fvlm::probe::kmeans;
use fvlm::synthdata::{generate_scene, SceneConfig};
use fvlm::vlm::{Tokenizer, VlmConfig, VlmModel};
use fvlm_bench::{random_boxes, random_distributions, random_grid, random_scores, random_tensor};

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[8, 32, 32, 32], 1);
    let w = random_tensor(&[3, 3, 32, 32], 2);
    let geom = ConvGeom { kernel: 3, stride: 1, pad: 1 };
    c.bench_function("conv3x3 forward+backward 8x32x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
            let loss = xv.conv2d(&wv, geom).sum_all();
            black_box(tape.backward(loss));
        })
    });
}

fn encoder(c: &mut Criterion) {
    let tok = Tokenizer::build(["a red circle"].into_iter(), &["background"]);
    let vlm = VlmModel::<f32>::new(VlmConfig::default(), tok, 3).unwrap();
    let (_, image, _) = generate_scene(4, &SceneConfig::default()).unwrap();
    let batch = to_batch::<f32>(&[&image]).unwrap();
    c.bench_function("image encoder 128x128", |b| b.iter(|| black_box(vlm.backbone(batch.clone()).unwrap())));
}

fn roi(c: &mut Criterion) {
    let grid = random_grid(16, 64, 8, 5);
    let boxes = random_boxes(64, 128.0, 6);
    c.bench_function("roi_align 64 boxes 7x7x64", |b| {
        b.iter(|| {
            for bx in &boxes {
                black_box(fvlm::detector::roi_align(&grid, *bx, 7).unwrap());
            }
        })
    });
}

fn fusion(c: &mut Criterion) {
    let base: BTreeSet<usize> = (1..=24).collect();
    let novel: BTreeSet<usize> = (25..=30).collect();
    let fuser = Fuser::new(&FusionParams::default(), &base, &novel).unwrap();
    let z = random_distributions(300, 31, 7);
    let w = random_distributions(300, 31, 8);
    c.bench_function("geometric fusion 300x31", |b| {
        b.iter(|| {
            for (z, w) in z.iter().zip(&w) {
                black_box(fuser.fuse(z, w).unwrap());
            }
        })
    });
}

fn ranking(c: &mut Criterion) {
    let boxes = random_boxes(1000, 128.0, 9);
    let scores: Vec<f32> = random_scores(1000, 10).into_iter().map(|s| s as f32).collect();
    c.bench_function("nms 1000 boxes", |b| b.iter(|| black_box(nms(&boxes, &scores, 0.5))));
    let s = random_scores(5000, 11);
    let labels: Vec<bool> = random_scores(5000, 12).into_iter().map(|v| v < 0.3).collect();
    c.bench_function("average_precision 5000 detections", |b| {
        b.iter(|| black_box(average_precision(&labels, &s, 2000)))
    });
}

fn clustering(c: &mut Criterion) {
    let points: Vec<Vec<f64>> = random_distributions(16, 128, 13);
    c.bench_function("kmeans 16x128 k=6", |b| b.iter(|| black_box(kmeans(&points, 6, 14, 100).unwrap())));
}

criterion_group!(benches, conv, encoder, roi, fusion, ranking, clustering);
criterion_main!(benches);
