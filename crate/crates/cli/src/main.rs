//! `fvlm`: data generation, pretraining, detector training, evaluation,
//! ablations and probing from one resolved run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use fvlm::config::RunConfig;
use fvlm::detector::TrainedDetector;
use fvlm::eval::{evaluate, evaluate_transfer, parse_axis_values, run_ablation, AblationAxis, AblationGrid, AblationInputs};
use fvlm::fusion::{detect, to_coco_results, write_overlay, write_results};
use fvlm::image::RgbImage;
use fvlm::pipeline;
use fvlm::probe::{probe_dataset, probe_image, probe_visualization};
use fvlm::seed::derive_seed;
use fvlm::synthdata::{
    read_caption_dataset, read_dataset, read_json, write_caption_dataset, write_dataset, write_json, CaptionDataset,
    DetectionDataset, VocabularySplit,
};
use fvlm::vlm::{single_object_set, zero_shot_accuracy, VlmModel};

const CONFIG_FILE: &str = "config.resolved.json";
const METRICS_FILE: &str = "metrics.json";
const TIMING_FILE: &str = "timing.json";
const REPORT_FILE: &str = "report.csv";
const DETECTIONS_FILE: &str = "detections.json";
const CHECKPOINTS: &str = "checkpoints";
const DATA_DIR: &str = "data";
const CACHE_ENV: &str = "FVLM_CACHE_DIR";
const ZERO_SHOT_IMAGES: usize = 600;

/// Keys holding wall-clock measurements; kept out of metrics.json so equal
/// configs give byte-identical metrics.
const TIMING_KEYS: [&str; 3] = ["seconds", "step_time_ms", "wall_seconds"];

#[derive(Parser)]
#[command(name = "fvlm", version, about = "Open-vocabulary detection on a frozen vision-language backbone")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Dotted-path override, e.g. `detector.backbone_lr=1e-3`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and write the caption, detection and transfer datasets.
    MakeData {
        /// Skip the (large) caption corpus.
        #[arg(long)]
        skip_captions: bool,
    },
    /// Contrastively pretrain the VLM and report zero-shot accuracy.
    Pretrain,
    /// Train `eval.runs` detector heads on the frozen VLM.
    Train {
        /// VLM checkpoint (default: <out>/checkpoints/vlm).
        #[arg(long)]
        vlm: Option<PathBuf>,
    },
    /// Detect objects of an arbitrary vocabulary in one image.
    Detect {
        #[arg(long)]
        image: PathBuf,
        /// One category name per line.
        #[arg(long)]
        vocab_file: PathBuf,
        /// Detector checkpoint (default: <out>/checkpoints/detector-0).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Minimum score drawn on the overlay.
        #[arg(long, default_value_t = 0.3)]
        min_score: f64,
    },
    /// Box AP of the trained runs on the validation set.
    Eval,
    /// Evaluate on the transfer vocabulary by embedding swap, no training.
    EvalTransfer,
    /// Sweep one axis and write one CSV row per value.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// VLM checkpoint (default: <out>/checkpoints/vlm).
        #[arg(long)]
        vlm: Option<PathBuf>,
    },
    /// Cluster frozen features and score them against instance masks.
    Probe {
        /// VLM checkpoint (default: <out>/checkpoints/vlm).
        #[arg(long)]
        vlm: Option<PathBuf>,
        /// Number of visualizations written to <out>/probe/.
        #[arg(long, default_value_t = 8)]
        visualize: usize,
    },
}

/// Errors reported as usage errors (exit 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    cache: Option<PathBuf>,
}

impl Run {
    fn checkpoints(&self) -> PathBuf {
        self.out.join(CHECKPOINTS)
    }

    fn vlm_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map_or_else(|| self.checkpoints().join("vlm"), Path::to_path_buf)
    }

    fn detector_dir(&self, run: usize) -> PathBuf {
        self.checkpoints().join(format!("detector-{run}"))
    }

    fn load_vlm(&self, explicit: Option<&Path>) -> Result<VlmModel<f32>> {
        let dir = self.vlm_dir(explicit);
        VlmModel::load(&dir).with_context(|| format!("loading VLM (run `fvlm pretrain --out {}` first)", self.out.display()))
    }

    fn load_detectors(&self) -> Result<Vec<(u64, TrainedDetector, PathBuf)>> {
        (0..self.cfg.eval.runs)
            .map(|r| {
                let dir = self.detector_dir(r);
                let m = TrainedDetector::load(&dir)
                    .with_context(|| format!("loading detector run {r} (run `fvlm train` first)"))?;
                Ok((pipeline::run_seed(&self.cfg, r), m, dir))
            })
            .collect()
    }

    fn data_key(&self) -> Value {
        json!({ "seed": self.cfg.seed, "data": self.cfg.data, "eval": self.cfg.eval })
    }

    /// Datasets written by `make-data` for the same data config, or freshly
    /// generated ones.
    fn data_dir_matches(&self) -> bool {
        let key = self.out.join(DATA_DIR).join("key.json");
        read_json::<Value>(&key).map(|v| v == self.data_key()).unwrap_or(false)
    }

    fn detection_data(&self) -> Result<(DetectionDataset, DetectionDataset)> {
        let dir = self.out.join(DATA_DIR);
        if self.data_dir_matches() && dir.join("train").exists() {
            return Ok((read_dataset(&dir.join("train"))?, read_dataset(&dir.join("val"))?));
        }
        Ok(pipeline::detection_datasets(&self.cfg)?)
    }

    fn caption_data(&self) -> Result<CaptionDataset> {
        let dir = self.out.join(DATA_DIR).join("captions");
        if self.data_dir_matches() && dir.exists() {
            return Ok(read_caption_dataset(&dir)?);
        }
        Ok(pipeline::caption_dataset(&self.cfg)?)
    }

    fn transfer_data(&self) -> Result<DetectionDataset> {
        let dir = self.out.join(DATA_DIR).join("transfer");
        if self.data_dir_matches() && dir.exists() {
            return Ok(read_dataset(&dir)?);
        }
        Ok(pipeline::transfer_dataset(&self.cfg)?)
    }

    /// Merge `value` under `command` into metrics.json (timing stripped)
    /// and timing.json (timing only).
    fn record(&self, command: &str, value: Value) -> Result<()> {
        let (metrics, timing) = split_timing(value);
        for (file, v) in [(METRICS_FILE, metrics), (TIMING_FILE, timing.unwrap_or(Value::Null))] {
            let path = self.out.join(file);
            let mut doc: Map<String, Value> = if path.exists() { read_json(&path)? } else { Map::new() };
            if v.is_null() {
                doc.remove(command);
            } else {
                doc.insert(command.to_string(), v);
            }
            write_json(&path, &doc)?;
        }
        Ok(())
    }
}

/// Separate wall-clock keys from everything else.
fn split_timing(value: Value) -> (Value, Option<Value>) {
    match value {
        Value::Object(map) => {
            let mut keep = Map::new();
            let mut timing = Map::new();
            for (k, v) in map {
                if TIMING_KEYS.contains(&k.as_str()) {
                    timing.insert(k, v);
                    continue;
                }
                let (m, t) = split_timing(v);
                keep.insert(k.clone(), m);
                if let Some(t) = t {
                    timing.insert(k, t);
                }
            }
            (Value::Object(keep), (!timing.is_empty()).then_some(Value::Object(timing)))
        }
        Value::Array(items) => {
            let mut keep = Vec::with_capacity(items.len());
            let mut timing = Vec::with_capacity(items.len());
            let mut any = false;
            for v in items {
                let (m, t) = split_timing(v);
                keep.push(m);
                any |= t.is_some();
                timing.push(t.unwrap_or(Value::Null));
            }
            (Value::Array(keep), any.then_some(Value::Array(timing)))
        }
        v => (v, None),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn make_data(run: &Run, skip_captions: bool) -> Result<()> {
    let dir = run.out.join(DATA_DIR);
    let (train, val) = pipeline::detection_datasets(&run.cfg)?;
    write_dataset(&train, &dir.join("train"))?;
    write_dataset(&val, &dir.join("val"))?;
    let transfer = pipeline::transfer_dataset(&run.cfg)?;
    write_dataset(&transfer, &dir.join("transfer"))?;
    let mut captions = 0;
    if !skip_captions {
        let c = pipeline::caption_dataset(&run.cfg)?;
        captions = c.len();
        write_caption_dataset(&c, &dir.join("captions"))?;
    }
    write_json(&dir.join("key.json"), &run.data_key())?;
    run.record(
        "make-data",
        json!({
            "train_images": train.len(),
            "train_instances": train.num_instances(),
            "val_images": val.len(),
            "val_instances": val.num_instances(),
            "transfer_images": transfer.len(),
            "caption_images": captions,
            "base_categories": train.split.base_ids.iter().map(|&i| train.split.name(i)).collect::<Vec<_>>(),
            "novel_categories": train.split.novel_ids.iter().map(|&i| train.split.name(i)).collect::<Vec<_>>(),
        }),
    )
}

fn pretrain(run: &Run) -> Result<()> {
    let captions = run.caption_data()?;
    let (vlm, log) = pipeline::pretrain_vlm(&run.cfg, &captions)?;
    vlm.save(&run.vlm_dir(None))?;
    let held = single_object_set(&run.cfg.data.scene, ZERO_SHOT_IMAGES, derive_seed(run.cfg.seed, "zero-shot", 0))?;
    let acc = zero_shot_accuracy(&vlm, &run.cfg.data.scene.category_names(), &held)?;
    log::info!("zero-shot top-1 {acc:.3} on {} held-out images", held.len());
    run.record(
        "pretrain",
        json!({
            "zero_shot_top1": acc,
            "zero_shot_images": held.len(),
            "final_temperature": vlm.temperature(),
            "checksum": vlm.checksum(),
            "log": log,
        }),
    )
}

fn train(run: &Run, vlm_path: Option<&Path>) -> Result<()> {
    let vlm = run.load_vlm(vlm_path)?;
    let (train, _) = run.detection_data()?;
    let vocab = pipeline::vocabulary(&vlm, train.categories(), run.cache.as_deref())?;
    let mut reports = Vec::new();
    for r in 0..run.cfg.eval.runs {
        let m = pipeline::train_run(&run.cfg, &vlm, &train, &vocab, r)?;
        m.save(&run.detector_dir(r))?;
        log::info!(
            "run {r}: {} trainable parameters, {:.1} ms/step",
            m.report.trainable_params,
            m.report.step_time_ms
        );
        reports.push(json!({ "run": r, "seed": pipeline::run_seed(&run.cfg, r), "report": m.report }));
    }
    run.record("train", json!({ "runs": reports }))
}

fn eval(run: &Run) -> Result<()> {
    let detectors = run.load_detectors()?;
    let (_, val) = run.detection_data()?;
    let vocab = pipeline::vocabulary(&detectors[0].1.vlm, val.categories(), run.cache.as_deref())?;
    let models: Vec<(u64, &TrainedDetector)> = detectors.iter().map(|(s, m, _)| (*s, m)).collect();
    let report = evaluate(&models, &val, &vocab, &run.cfg.fusion)?;
    log::info!(
        "AP novel {:.2} base {:.2} all {:.2}",
        100.0 * report.ap_novel.mean,
        100.0 * report.ap_base.mean,
        100.0 * report.ap_all.mean
    );
    let mut csv = String::from("category,novel,ap\n");
    for (i, name) in report.categories.iter().enumerate() {
        let ap = report.per_category[i].map_or(String::new(), |v| format!("{v:.6}"));
        csv.push_str(&format!("{name},{},{ap}\n", report.novel_ids.contains(&(i + 1))));
    }
    fs::write(run.out.join(REPORT_FILE), csv).context("writing report.csv")?;
    run.record("eval", to_value(&report))
}

fn eval_transfer(run: &Run) -> Result<()> {
    let detectors = run.load_detectors()?;
    let data = run.transfer_data()?;
    let models: Vec<(u64, &TrainedDetector)> = detectors.iter().map(|(s, m, _)| (*s, m)).collect();
    let dirs: Vec<&Path> = detectors.iter().map(|(_, _, d)| d.as_path()).collect();
    let mut reports = Vec::new();
    for &beta in &run.cfg.eval.transfer_betas {
        let r = evaluate_transfer(&models, &dirs, &data, &run.cfg.fusion, beta)?;
        log::info!("transfer beta {beta}: AP {:.2}", 100.0 * r.report.ap_all.mean);
        reports.push(r);
    }
    run.record("eval-transfer", json!({ "categories": data.categories(), "betas": reports }))
}

fn detect_image(run: &Run, image: &Path, vocab_file: &Path, checkpoint: Option<&Path>, min_score: f64) -> Result<()> {
    let dir = checkpoint.map_or_else(|| run.detector_dir(0), Path::to_path_buf);
    let trained = TrainedDetector::load(&dir).with_context(|| format!("loading detector {}", dir.display()))?;
    let text = fs::read_to_string(vocab_file).with_context(|| format!("reading {}", vocab_file.display()))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if names.is_empty() {
        bail!(UsageError(format!("{}: vocabulary file is empty", vocab_file.display())));
    }
    // Names the detector was trained on keep the base weight; all others
    // are novel.
    let train_split = pipeline::vocabulary_split(&run.cfg)?;
    let base_names: Vec<&str> = trained.base_ids.iter().map(|&i| train_split.name(i)).collect();
    let mut split = VocabularySplit::all_novel(names.clone());
    for (i, n) in names.iter().enumerate() {
        if base_names.contains(&n.as_str()) {
            split.novel_ids.remove(&(i + 1));
            split.base_ids.insert(i + 1);
        }
    }
    let img = RgbImage::load_png(image)?;
    let vocab = pipeline::vocabulary(&trained.vlm, &names, run.cache.as_deref())?;
    let dets = detect(&trained, &img, &vocab, &split, &run.cfg.fusion)?;
    let results = to_coco_results(1, &dets, img.width, img.height);
    write_results(&run.out.join(DETECTIONS_FILE), &results)?;
    write_overlay(&run.out.join("overlay.png"), &img, 1, &results, min_score)?;
    log::info!("{} detections, {} above {min_score}", results.len(), results.iter().filter(|r| r.score >= min_score).count());
    run.record(
        "detect",
        json!({
            "image": image.display().to_string(),
            "vocabulary": names,
            "base_categories": split.base_ids,
            "detections": results.len(),
        }),
    )
}

fn ablate(run: &Run, axis: AblationAxis, raw_values: &str, vlm_path: Option<&Path>) -> Result<()> {
    let values = parse_axis_values(axis, raw_values).map_err(|e| UsageError(e.to_string()))?;
    if values.is_empty() {
        bail!(UsageError("--values is empty".into()));
    }
    let vlm = run.load_vlm(vlm_path)?;
    let (train, val) = run.detection_data()?;
    let vocab = pipeline::vocabulary(&vlm, train.categories(), run.cache.as_deref())?;
    let grid = AblationGrid {
        axis,
        values,
        runs_per_cell: run.cfg.eval.runs,
    };
    // Inference-only axes reuse trained runs when they were trained on this VLM.
    let existing: Option<Vec<TrainedDetector>> = if axis.inference_only() {
        run.load_detectors()
            .ok()
            .filter(|d| d.iter().all(|(_, m, _)| m.vlm.checksum() == vlm.checksum()))
            .map(|d| d.into_iter().map(|(_, m, _)| m).collect())
    } else {
        None
    };
    let inputs = AblationInputs {
        vlm: &vlm,
        train: &train,
        val: &val,
        vocab: &vocab,
    };
    let table = run_ablation(&grid, &run.cfg, &inputs, existing.as_deref())?;
    fs::write(run.out.join(REPORT_FILE), table.to_csv()).context("writing report.csv")?;
    run.record("ablate", to_value(&table))
}

fn probe(run: &Run, vlm_path: Option<&Path>, visualize: usize) -> Result<()> {
    let vlm = run.load_vlm(vlm_path)?;
    let (_, val) = run.detection_data()?;
    let vocab = pipeline::vocabulary(&vlm, val.categories(), run.cache.as_deref())?;
    let seed = derive_seed(run.cfg.seed, "probe", 0);
    let report = probe_dataset(&vlm, &val, &vocab, &run.cfg.probe, run.cfg.fusion.temperature as f32, seed)?;
    let dir = run.out.join("probe");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for s in val.samples.iter().take(visualize) {
        let (_, map, labels) = probe_image(&vlm, s, &run.cfg.probe, seed)?;
        probe_visualization(&s.image, &map, &labels).save_png(&dir.join(format!("probe_{:06}.png", s.id)))?;
    }
    log::info!(
        "purity {:.3} vs shuffled {:.3}; {:.0}% of images beat it by the margin",
        report.mean_purity,
        report.mean_shuffled_purity,
        100.0 * report.fraction_above_margin
    );
    write_json(&dir.join("report.json"), &report)?;
    run.record("probe", to_value(&report))
}

fn execute(cli: Cli) -> Result<()> {
    let mut overrides = cli.global.overrides.clone();
    if let Some(seed) = cli.global.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides).map_err(|e| UsageError(e.to_string()))?;
    let out = cli.global.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json()).context("writing the resolved config")?;
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let run = Run { cfg, out, cache };
    match cli.command {
        Command::MakeData { skip_captions } => make_data(&run, skip_captions),
        Command::Pretrain => pretrain(&run),
        Command::Train { vlm } => train(&run, vlm.as_deref()),
        Command::Detect {
            image,
            vocab_file,
            checkpoint,
            min_score,
        } => detect_image(&run, &image, &vocab_file, checkpoint.as_deref(), min_score),
        Command::Eval => eval(&run),
        Command::EvalTransfer => eval_transfer(&run),
        Command::Ablate { axis, values, vlm } => ablate(&run, axis, &values, vlm.as_deref()),
        Command::Probe { vlm, visualize } => probe(&run, vlm.as_deref(), visualize),
    }
}

/// One line: the error and its causes joined by `: `.
fn one_line(e: &anyhow::Error) -> String {
    e.chain()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(": ")
        .replace('\n', " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.chain().any(|c| c.is::<UsageError>());
            if usage {
                eprintln!("error: usage: {} (see `fvlm --help`)", one_line(&e));
                ExitCode::from(2)
            } else {
                eprintln!("error: runtime: {}", one_line(&e));
                ExitCode::from(1)
            }
        }
    }
}
