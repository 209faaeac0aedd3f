//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Pretraining and detector training run at the default configuration and
//! are cached under `target/acceptance/`, keyed by hashes of the
//! configuration and the sources they depend on; a code change retrains.
//! Set `FVLM_ACCEPTANCE_DIR` to move the cache. The process exits nonzero
//! only when the harness itself breaks; unmet criteria print FAIL.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fvlm::config::RunConfig;
use fvlm::detector::{detection_gradient_check, TrainReport, TrainedDetector};
use fvlm::eval::{average_precision, evaluate, evaluate_transfer, predict_dataset, score_predictions};
use fvlm::fusion::{fuse_scores, vlm_region_scores, FusionKind, FusionParams, Fuser, RawPrediction};
use fvlm::pipeline;
use fvlm::probe::probe_dataset;
use fvlm::seed::{derive_seed, rng};
use fvlm::synthdata::{read_json, write_json, DetectionDataset};
use fvlm::vlm::{contrastive_gradient_check, single_object_set, zero_shot_accuracy, zero_shot_classify, VlmModel, VocabularyEmbedding};
use fvlm::BoxRegion;

const PRETRAIN_BUDGET_S: f64 = 30.0 * 60.0;
const TRAIN_BUDGET_S: f64 = 60.0 * 60.0;
const ZERO_SHOT_IMAGES: usize = 600;
const FINETUNE_STEPS: usize = 20;

type Outcome = (bool, String);

/// Sources the pretrained VLM depends on.
const VLM_SOURCES: [&str; 9] = ["autograd", "nn.rs", "optim.rs", "tensor.rs", "image.rs", "seed.rs", "synthdata", "vlm", "checkpoint.rs"];

struct Harness {
    cfg: RunConfig,
    dir: PathBuf,
    vlm_dir: PathBuf,
    results: Vec<(usize, &'static str, Outcome)>,
}

/// Hash of the config and the sources under `prefixes` (all when empty).
fn source_fingerprint(cfg: &RunConfig, prefixes: &[&str]) -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("source dir").flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.retain(|f| {
        let rel = f.strip_prefix(&root).unwrap().to_string_lossy().into_owned();
        prefixes.is_empty() || prefixes.iter().any(|p| rel.starts_with(p))
    });
    files.sort();
    let mut h = Sha256::new();
    h.update(cfg.to_json());
    for f in files {
        h.update(f.strip_prefix(&root).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).expect("source file"));
    }
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Serialize, Deserialize)]
struct Timed {
    seconds: f64,
}

impl Harness {
    fn record(&mut self, id: usize, name: &'static str, outcome: Outcome) {
        println!("criterion {id:>2} [{}] {name}: {}", if outcome.0 { "PASS" } else { "FAIL" }, outcome.1);
        self.results.push((id, name, outcome));
    }

    /// The default-budget VLM and its wall time, trained once per key.
    fn vlm(&self) -> (VlmModel<f32>, f64) {
        let dir = self.vlm_dir.join("vlm");
        let timing = self.vlm_dir.join("vlm-time.json");
        if let (Ok(m), Ok(t)) = (VlmModel::load(&dir), read_json::<Timed>(&timing)) {
            return (m, t.seconds);
        }
        eprintln!("pretraining the VLM at the default budget ...");
        let start = Instant::now();
        let captions = pipeline::caption_dataset(&self.cfg).expect("caption data");
        let (m, _) = pipeline::pretrain_vlm(&self.cfg, &captions).expect("pretraining");
        let seconds = start.elapsed().as_secs_f64();
        m.save(&dir).expect("save vlm");
        write_json(&timing, &Timed { seconds }).expect("write timing");
        (m, seconds)
    }

    /// `eval.runs` detector runs of `cfg` (cached by `tag`).
    fn runs(&self, tag: &str, cfg: &RunConfig, vlm: &VlmModel<f32>, train: &DetectionDataset, vocab: &VocabularyEmbedding) -> Vec<(u64, TrainedDetector, PathBuf)> {
        (0..cfg.eval.runs)
            .map(|r| {
                let dir = self.dir.join(format!("{tag}-{r}"));
                let m = match TrainedDetector::load(&dir) {
                    Ok(m) => m,
                    Err(_) => {
                        eprintln!("training {tag} run {r} ...");
                        let m = pipeline::train_run(cfg, vlm, train, vocab, r).expect("detector training");
                        m.save(&dir).expect("save detector");
                        m
                    }
                };
                (pipeline::run_seed(cfg, r), m, dir)
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per-run summaries of cached predictions under `params`.
fn score_runs(raws: &[Vec<RawPrediction>], val: &DetectionDataset, params: &FusionParams) -> Vec<fvlm::eval::ApSummary> {
    let split = &val.split;
    raws.iter()
        .map(|r| {
            let fuser = Fuser::new(params, &split.base_ids, &split.novel_ids).expect("fuser");
            score_predictions(r, val, split, &fuser).expect("scoring")
        })
        .collect()
}

fn criterion_fusion_algebra() -> Outcome {
    let base: BTreeSet<usize> = [1, 3].into();
    let novel: BTreeSet<usize> = [2, 4].into();
    let mut r = rng(41);
    let mut worst = 0f64;
    let mut bounded = true;
    let mut passthrough = true;
    for _ in 0..500 {
        let mut draw = || {
            let v: Vec<f64> = (0..5).map(|_| r.gen_range(1e-3..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let (z, w) = (draw(), draw());
        for kind in [FusionKind::Geometric, FusionKind::Arithmetic] {
            let p = |a: f64, b: f64| FusionParams { alpha: a, beta: b, kind, ..Default::default() };
            let s0 = fuse_scores(&z, &w, &p(0.0, 0.0), &base, &novel).unwrap();
            let s1 = fuse_scores(&z, &w, &p(1.0, 1.0), &base, &novel).unwrap();
            let sd = fuse_scores(&z, &w, &p(0.35, 0.65), &base, &novel).unwrap();
            passthrough &= s0[0] == z[0] && s1[0] == z[0] && sd[0] == z[0];
            for c in 1..5 {
                worst = worst.max((s0[c] - z[c]).abs()).max((s1[c] - w[c]).abs());
                let (lo, hi) = (z[c].min(w[c]), z[c].max(w[c]));
                bounded &= sd[c] >= lo - 1e-15 && sd[c] <= hi + 1e-15;
            }
        }
    }
    // Novel category 2 with z = 0.8, w = 0.5 under beta = 0.65.
    let z = [0.1, 0.1, 0.8, 0.1, 0.1];
    let w = [0.2, 0.2, 0.5, 0.2, 0.2];
    let s = fuse_scores(&z, &w, &FusionParams::default(), &base, &novel).unwrap();
    let expected = (0.35 * 0.8f64.ln() + 0.65 * 0.5f64.ln()).exp();
    let scalar = (s[2] - expected).abs();
    (
        worst < 1e-12 && bounded && passthrough && scalar < 1e-9,
        format!(
            "endpoint error {worst:.1e}, bounded {bounded}, background passthrough {passthrough}, scalar {:.10} vs {expected:.10} (|d| {scalar:.1e})",
            s[2]
        ),
    )
}

fn criterion_gradients() -> Outcome {
    let c = contrastive_gradient_check(3).expect("contrastive check");
    let d = detection_gradient_check(3).expect("detection check");
    let (cn, ce) = c.worst();
    let (dn, de) = d.worst();
    (
        ce < 1e-6 && de < 1e-6,
        format!("contrastive worst {ce:.2e} ({cn}); detection worst {de:.2e} ({dn})"),
    )
}

/// 101-point interpolated AP straight from the definition: at each recall
/// level, the best precision over all cutoffs reaching it.
fn brute_force_ap(labels: &[bool], scores: &[f64], n_gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    for cut in 1..=order.len() {
        let tp = order[..cut].iter().filter(|&&i| labels[i]).count();
        points.push((tp as f64 / n_gt as f64, tp as f64 / cut as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let level = k as f64 / 100.0;
        total += points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
    }
    total / 101.0
}

fn criterion_ap_oracle() -> Outcome {
    let mut r = rng(17);
    let mut mismatches = 0;
    let mut worst = 0f64;
    for _ in 0..200 {
        let n = r.gen_range(1..12);
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let tp = labels.iter().filter(|&&l| l).count();
        let n_gt = tp + r.gen_range(0..4);
        if n_gt == 0 {
            continue;
        }
        let mut scores: Vec<f64> = Vec::new();
        while scores.len() < n {
            let s = (r.gen_range(0..1000) as f64) / 1000.0;
            if !scores.contains(&s) {
                scores.push(s);
            }
        }
        let got = average_precision(&labels, &scores, n_gt).unwrap();
        let want = brute_force_ap(&labels, &scores, n_gt);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let hand = average_precision(&[false, true], &[0.9, 0.8], 1).unwrap();
    (
        mismatches == 0 && (hand - 0.5).abs() < 1e-12,
        format!("200 instances, {mismatches} mismatches (worst |d| {worst:.1e}); hand case {hand}"),
    )
}

fn main() {
    let cfg = RunConfig::default();
    let root = std::env::var_os("FVLM_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
    let dir = root.join(source_fingerprint(&cfg, &[]));
    let vlm_dir = root.join(format!("vlm-{}", source_fingerprint(&cfg, &VLM_SOURCES)));
    fs::create_dir_all(&dir).expect("cache dir");
    println!("acceptance artifacts: {} (VLM: {})", dir.display(), vlm_dir.display());
    let mut h = Harness {
        cfg: cfg.clone(),
        dir,
        vlm_dir,
        results: Vec::new(),
    };

    // Cheap, model-free criteria first.
    h.record(3, "fusion algebra", criterion_fusion_algebra());
    h.record(4, "gradient correctness", criterion_gradients());
    h.record(5, "AP oracle equivalence", criterion_ap_oracle());

    let (vlm, pretrain_s) = h.vlm();
    let (train, val) = pipeline::detection_datasets(&cfg).expect("detection data");
    let vocab = pipeline::vocabulary(&vlm, train.categories(), None).expect("vocabulary");

    {
        let mut worst = 0f32;
        for s in val.samples.iter().take(20) {
            let grids = vlm.encode_image(&s.image).unwrap();
            let full = BoxRegion::new(0.0, 0.0, s.image.width as f32, s.image.height as f32);
            for t in [1.0, 0.01] {
                let region = vlm_region_scores(&vlm, &grids[2], &[full], &vocab, t).unwrap();
                let whole = zero_shot_classify(&vlm, &s.image, &vocab, t).unwrap();
                for (a, b) in region[0].iter().zip(&whole) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        h.record(2, "whole-image equivalence", (worst <= 1e-5, format!("max |d| {worst:.2e} over 20 images, T in {{1, 0.01}}")));
    }

    {
        let held = single_object_set(&cfg.data.scene, ZERO_SHOT_IMAGES, derive_seed(cfg.seed, "zero-shot", 0)).unwrap();
        let acc = zero_shot_accuracy(&vlm, &cfg.data.scene.category_names(), &held).unwrap();
        h.record(
            6,
            "zero-shot pretraining quality",
            (
                acc >= 0.80 && pretrain_s <= PRETRAIN_BUDGET_S,
                format!("top-1 {acc:.3} on {ZERO_SHOT_IMAGES} held-out images (chance 0.033), pretraining {:.1} min", pretrain_s / 60.0),
            ),
        );
    }

    let runs = h.runs("detector", &cfg, &vlm, &train, &vocab);
    let train_s: f64 = runs.iter().map(|(_, m, _)| m.report.seconds).sum();

    {
        let vlm_sum = vlm.checksum();
        let changed: Vec<String> = runs
            .iter()
            .filter(|(_, m, _)| m.vlm.checksum() != vlm_sum || !m.report.backbone_changed.is_empty() || m.report.backbone_max_delta != 0.0)
            .map(|(s, _, _)| s.to_string())
            .collect();
        h.record(
            1,
            "frozen-backbone contract",
            (
                changed.is_empty(),
                format!("{} runs, VLM checksum {} after training; runs with changes: {changed:?}", runs.len(), &vlm_sum[..12]),
            ),
        );
    }

    let raws: Vec<Vec<RawPrediction>> = runs.iter().map(|(_, m, _)| predict_dataset(m, &val, &vocab).unwrap()).collect();
    {
        let at = |beta: f64| mean(&score_runs(&raws, &val, &FusionParams { beta, ..cfg.fusion.clone() }).iter().map(|s| s.ap_novel).collect::<Vec<_>>());
        let (b0, bd, b1) = (at(0.0), at(cfg.fusion.beta), at(1.0));
        let margin = bd - b0.max(b1);
        h.record(
            7,
            "novel-category detection lift",
            (
                margin >= 0.02 && train_s <= TRAIN_BUDGET_S,
                format!(
                    "AP_novel beta=0 {:.2}, beta={} {:.2}, beta=1 {:.2} (margin {:.2} points); 3 runs trained in {:.1} min",
                    100.0 * b0,
                    cfg.fusion.beta,
                    100.0 * bd,
                    100.0 * b1,
                    100.0 * margin,
                    train_s / 60.0
                ),
            ),
        );
    }

    {
        let of = |kind| mean(&score_runs(&raws, &val, &FusionParams { kind, ..cfg.fusion.clone() }).iter().map(|s| s.ap_novel).collect::<Vec<_>>());
        let (g, a) = (of(FusionKind::Geometric), of(FusionKind::Arithmetic));
        h.record(8, "fusion-kind direction", (g > a, format!("AP_novel geometric {:.2} vs arithmetic {:.2}", 100.0 * g, 100.0 * a)));
    }

    {
        let mut c4 = cfg.clone();
        c4.detector.model.fpn_repeats = 4;
        let runs4 = h.runs("detector-n4", &c4, &vlm, &train, &vocab);
        let raws4: Vec<Vec<RawPrediction>> = runs4.iter().map(|(_, m, _)| predict_dataset(m, &val, &vocab).unwrap()).collect();
        let s1 = score_runs(&raws, &val, &cfg.fusion);
        let s4 = score_runs(&raws4, &val, &cfg.fusion);
        let base1: Vec<f64> = s1.iter().map(|s| s.ap_base).collect();
        let base4: Vec<f64> = s4.iter().map(|s| s.ap_base).collect();
        let nov1 = mean(&s1.iter().map(|s| s.ap_novel).collect::<Vec<_>>());
        let nov4 = mean(&s4.iter().map(|s| s.ap_novel).collect::<Vec<_>>());
        let noise = sample_std(&base1).max(sample_std(&base4));
        let ok = mean(&base4) >= mean(&base1) - noise && nov1 - nov4 < 0.01;
        h.record(
            9,
            "FPN capacity direction",
            (
                ok,
                format!(
                    "AP_base N=1 {:.2} / N=4 {:.2} (noise {:.2}); AP_novel N=1 {:.2} / N=4 {:.2}",
                    100.0 * mean(&base1),
                    100.0 * mean(&base4),
                    100.0 * noise,
                    100.0 * nov1,
                    100.0 * nov4
                ),
            ),
        );
    }

    {
        let models: Vec<(u64, &TrainedDetector)> = runs.iter().map(|(s, m, _)| (*s, m)).collect();
        let dirs: Vec<&Path> = runs.iter().map(|(_, _, d)| d.as_path()).collect();
        let standard = evaluate(&models, &val, &vocab, &cfg.fusion).unwrap();
        // Transfer scores every category with beta, so the like-for-like
        // reference is standard evaluation with alpha set to beta.
        let matched = FusionParams { alpha: cfg.fusion.beta, ..cfg.fusion.clone() };
        let reference = evaluate(&models, &val, &vocab, &matched).unwrap();
        let transfer = evaluate_transfer(&models, &dirs, &val, &cfg.fusion, cfg.fusion.beta);
        let outcome = match transfer {
            Ok(t) => {
                let d = (t.report.ap_all.mean - reference.ap_all.mean).abs();
                (
                    d <= 0.005 && t.checkpoint_digest_before == t.checkpoint_digest_after && t.alpha_reads == 0,
                    format!(
                        "identity transfer AP_all {:.2} vs standard at matched weights {:.2} (|d| {:.2} points; default-weight standard {:.2}); checkpoint digests unchanged {}; alpha reads {}",
                        100.0 * t.report.ap_all.mean,
                        100.0 * reference.ap_all.mean,
                        100.0 * d,
                        100.0 * standard.ap_all.mean,
                        t.checkpoint_digest_before == t.checkpoint_digest_after,
                        t.alpha_reads
                    ),
                )
            }
            Err(e) => (false, format!("transfer failed: {e}")),
        };
        h.record(10, "transfer no-finetune contract", outcome);
    }

    {
        let report = probe_dataset(&vlm, &val, &vocab, &cfg.probe, cfg.fusion.temperature as f32, derive_seed(cfg.seed, "probe", 0)).unwrap();
        h.record(
            11,
            "probe quality",
            (
                report.fraction_above_margin >= 0.8,
                format!(
                    "{:.0}% of {} images beat the shuffled baseline by 0.15 (purity {:.3} vs {:.3})",
                    100.0 * report.fraction_above_margin,
                    report.images.len(),
                    report.mean_purity,
                    report.mean_shuffled_purity
                ),
            ),
        );
    }

    {
        let frozen: &TrainReport = &runs[0].1.report;
        let ft_path = h.dir.join("finetune-report.json");
        let ft: TrainReport = read_json(&ft_path).unwrap_or_else(|_| {
            let mut c = cfg.clone();
            c.detector.loss.backbone_lr = 1e-3;
            c.detector.train.steps = FINETUNE_STEPS;
            let m = pipeline::train_run(&c, &vlm, &train, &vocab, 0).expect("finetune run");
            write_json(&ft_path, &m.report).expect("write report");
            m.report
        });
        h.record(
            12,
            "trainable-parameter accounting",
            (
                frozen.trainable_params < ft.trainable_params && frozen.step_time_ms > 0.0 && ft.step_time_ms > 0.0 && ft.finetuned,
                format!(
                    "frozen {} trainable params at {:.0} ms/step; finetune {} at {:.0} ms/step",
                    frozen.trainable_params, frozen.step_time_ms, ft.trainable_params, ft.step_time_ms
                ),
            ),
        );
    }

    h.results.sort_by_key(|r| r.0);
    let passed = h.results.iter().filter(|r| r.2 .0).count();
    println!("acceptance summary: {passed}/{} criteria pass", h.results.len());
    for (id, name, (ok, _)) in &h.results {
        println!("  {id:>2} {} {name}", if *ok { "PASS" } else { "FAIL" });
    }
}
