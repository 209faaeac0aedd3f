use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detector::TrainedDetector;
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionParams, Fuser, RawPrediction};
use crate::pipeline::{run_seed, train_run};
use crate::synthdata::DetectionDataset;
use crate::vlm::{VlmModel, VocabularyEmbedding};

use super::report::{predict_dataset, run_result, score_predictions, RunResult, Stat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    FusionKind,
    Alpha,
    Beta,
    TemperatureT,
    FpnRepeatsN,
    BackgroundGamma,
    BackboneLr,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        Self::FusionKind,
        Self::Alpha,
        Self::Beta,
        Self::TemperatureT,
        Self::FpnRepeatsN,
        Self::BackgroundGamma,
        Self::BackboneLr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FusionKind => "fusion_kind",
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::TemperatureT => "temperature_t",
            Self::FpnRepeatsN => "fpn_repeats_n",
            Self::BackgroundGamma => "background_gamma",
            Self::BackboneLr => "backbone_lr",
        }
    }

    /// Axes that only change test-time scoring and reuse trained runs.
    pub fn inference_only(self) -> bool {
        matches!(self, Self::FusionKind | Self::Alpha | Self::Beta | Self::TemperatureT)
    }

    /// Dotted config key the axis sets.
    pub fn config_key(self) -> &'static str {
        match self {
            Self::FusionKind => "fusion.kind",
            Self::Alpha => "fusion.alpha",
            Self::Beta => "fusion.beta",
            Self::TemperatureT => "fusion.temperature",
            Self::FpnRepeatsN => "detector.fpn_repeats",
            Self::BackgroundGamma => "detector.background_weight",
            Self::BackboneLr => "detector.backbone_lr",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation axis {s:?} ({})", names.join("|")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub runs_per_cell: usize,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation needs at least one value".into()));
        }
        if self.runs_per_cell == 0 {
            return Err(Error::Config("runs_per_cell must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_value: String,
    pub ap_novel: Stat,
    pub ap_base: Stat,
    pub ap_all: Stat,
    pub trainable_params: usize,
    pub step_time_ms: f64,
    /// Largest change of any backbone array over the cell's runs.
    pub backbone_max_delta: f64,
    pub runs: Vec<RunResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Detector trainings performed for the whole grid.
    pub trainings: usize,
}

pub const CSV_HEADER: &str =
    "axis_value,ap_novel_mean,ap_novel_std,ap_base_mean,ap_base_std,ap_all_mean,ap_all_std,trainable_params,step_time_ms";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let opt = |s: Option<f64>| s.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{},{:.6},{},{:.6},{},{},{:.3}",
                r.axis_value,
                r.ap_novel.mean,
                opt(r.ap_novel.std),
                r.ap_base.mean,
                opt(r.ap_base.std),
                r.ap_all.mean,
                opt(r.ap_all.std),
                r.trainable_params,
                r.step_time_ms
            );
        }
        out
    }
}

/// The frozen VLM, data and vocabulary an ablation runs on.
pub struct AblationInputs<'a> {
    pub vlm: &'a VlmModel<f32>,
    pub train: &'a DetectionDataset,
    pub val: &'a DetectionDataset,
    pub vocab: &'a VocabularyEmbedding,
}

fn cell_config(base: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(base).expect("config serializes");
    crate::config::apply_override(&mut doc, axis.config_key(), value)?;
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{}={value}: {e}", axis.name())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn row(value: &str, runs: Vec<RunResult>, backbone_max_delta: f64) -> AblationRow {
    let col = |f: &dyn Fn(&RunResult) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let k = runs.len().max(1) as f64;
    AblationRow {
        axis_value: value.to_string(),
        ap_novel: col(&|r| r.summary.ap_novel),
        ap_base: col(&|r| r.summary.ap_base),
        ap_all: col(&|r| r.summary.ap_all),
        trainable_params: runs.first().map_or(0, |r| r.trainable_params),
        step_time_ms: runs.iter().map(|r| r.step_time_ms).sum::<f64>() / k,
        backbone_max_delta,
        runs,
        error: None,
    }
}

fn failed_row(value: &str, e: &Error) -> AblationRow {
    log::warn!("ablation cell {value} failed: {e}");
    AblationRow {
        error: Some(e.to_string()),
        ..row(value, Vec::new(), 0.0)
    }
}

fn score_cell(
    cached: &[(u64, &TrainedDetector, Vec<RawPrediction>)],
    val: &DetectionDataset,
    params: &FusionParams,
) -> Result<Vec<RunResult>> {
    let split = &val.split;
    cached
        .iter()
        .map(|(seed, m, raws)| {
            let fuser = Fuser::new(params, &split.base_ids, &split.novel_ids)?;
            Ok(run_result(m, *seed, score_predictions(raws, val, split, &fuser)?))
        })
        .collect()
}

/// Run one ablation axis. Inference-only axes reuse `trained` (training
/// `runs_per_cell` runs of `base` if absent); the others retrain per cell.
/// A failing cell is recorded in its row and the sweep continues.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &RunConfig,
    inputs: &AblationInputs<'_>,
    trained: Option<&[TrainedDetector]>,
) -> Result<AblationTable> {
    grid.validate()?;
    let mut trainings = 0;
    let mut rows = Vec::with_capacity(grid.values.len());
    if grid.axis.inference_only() {
        let owned: Vec<TrainedDetector>;
        let models: &[TrainedDetector] = match trained {
            Some(t) => t,
            None => {
                owned = (0..grid.runs_per_cell)
                    .map(|r| train_run(base, inputs.vlm, inputs.train, inputs.vocab, r))
                    .collect::<Result<_>>()?;
                trainings += owned.len();
                &owned
            }
        };
        let cached: Vec<(u64, &TrainedDetector, Vec<RawPrediction>)> = models
            .iter()
            .take(grid.runs_per_cell)
            .enumerate()
            .map(|(r, m)| Ok((run_seed(base, r), m, predict_dataset(m, inputs.val, inputs.vocab)?)))
            .collect::<Result<_>>()?;
        for v in &grid.values {
            let result = cell_config(base, grid.axis, v).and_then(|cfg| score_cell(&cached, inputs.val, &cfg.fusion));
            rows.push(match result {
                Ok(runs) => row(v, runs, 0.0),
                Err(e) => failed_row(v, &e),
            });
        }
    } else {
        for v in &grid.values {
            let mut cell_trainings = 0;
            let result = cell_config(base, grid.axis, v).and_then(|cfg| {
                let mut runs = Vec::new();
                let mut delta = 0f64;
                for r in 0..grid.runs_per_cell {
                    let m = train_run(&cfg, inputs.vlm, inputs.train, inputs.vocab, r)?;
                    cell_trainings += 1;
                    delta = delta.max(m.report.backbone_max_delta);
                    let split = &inputs.val.split;
                    let fuser = Fuser::new(&cfg.fusion, &split.base_ids, &split.novel_ids)?;
                    let raws = predict_dataset(&m, inputs.val, inputs.vocab)?;
                    runs.push(run_result(&m, run_seed(&cfg, r), score_predictions(&raws, inputs.val, split, &fuser)?));
                }
                Ok((runs, delta))
            });
            trainings += cell_trainings;
            rows.push(match result {
                Ok((runs, delta)) => row(v, runs, delta),
                Err(e) => failed_row(v, &e),
            });
        }
    }
    Ok(AblationTable {
        axis: grid.axis,
        rows,
        trainings,
    })
}

/// Parse `--values`, checking each against the axis type.
pub fn parse_axis_values(axis: AblationAxis, raw: &str) -> Result<Vec<String>> {
    let values: Vec<String> = raw.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    for v in &values {
        let ok = match axis {
            AblationAxis::FusionKind => v.parse::<FusionKind>().is_ok(),
            AblationAxis::FpnRepeatsN => v.parse::<usize>().is_ok(),
            _ => v.parse::<f64>().is_ok(),
        };
        if !ok {
            return Err(Error::Config(format!("invalid {} value {v:?}", axis.name())));
        }
    }
    Ok(values)
}
