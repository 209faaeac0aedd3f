//! The single hierarchical run configuration. Sections are flat JSON
//! objects (`detector.backbone_lr`, `vlm.steps`, ...) that are routed to the
//! per-module config types on load; unknown keys are rejected.

use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::detector::{DetectorConfig, DetectorTrainConfig, LossConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::synthdata::{Color, SceneConfig, Shape};
use crate::vlm::{PretrainConfig, VlmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub train_images: usize,
    pub val_images: usize,
    pub caption_images: usize,
    pub novel_fraction: f64,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            train_images: 2000,
            val_images: 500,
            caption_images: 20000,
            novel_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSection {
    pub scene: SceneConfig,
    pub sizes: DataSizes,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VlmSection {
    pub model: VlmConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectorSection {
    pub model: DetectorConfig,
    pub loss: LossConfig,
    pub train: DetectorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Independently seeded detector runs per reported number.
    pub runs: usize,
    /// Palette and shapes of the transfer vocabulary (words must exist in
    /// the caption corpus).
    pub transfer_colors: Vec<Color>,
    pub transfer_shapes: Vec<Shape>,
    pub transfer_images: usize,
    pub transfer_betas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 3,
            transfer_colors: vec![Color::Purple, Color::Orange, Color::Yellow],
            transfer_shapes: Vec::new(),
            transfer_images: 300,
            transfer_betas: vec![0.0, 0.3, 0.65],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub k: usize,
    /// L2-normalize cells before clustering.
    pub normalize: bool,
    pub max_iters: usize,
    pub images: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 6,
            normalize: false,
            max_iters: 100,
            images: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every component derives its own from it.
    pub seed: u64,
    pub data: DataSection,
    pub vlm: VlmSection,
    pub detector: DetectorSection,
    pub fusion: FusionParams,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

fn object_of<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config sections are structs"),
    }
}

fn keys_of<T: Serialize + Default>() -> Vec<String> {
    object_of(&T::default()).keys().cloned().collect()
}

/// Route the keys of one flat section to its parts.
fn split_section<E: serde::de::Error>(
    section: &str,
    map: Map<String, Value>,
    parts: &[Vec<String>],
) -> std::result::Result<Vec<Map<String, Value>>, E> {
    let mut out = vec![Map::new(); parts.len()];
    for (k, v) in map {
        let i = parts
            .iter()
            .position(|keys| keys.contains(&k))
            .ok_or_else(|| E::custom(format!("unknown field `{k}` in section `{section}`")))?;
        out[i].insert(k, v);
    }
    Ok(out)
}

fn merge(parts: Vec<Map<String, Value>>) -> Map<String, Value> {
    parts.into_iter().flatten().collect()
}

macro_rules! flat_section {
    ($ty:ident, $name:literal, $($field:ident: $fty:ty),+) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                merge(vec![$(object_of(&self.$field)),+]).serialize(s)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let map = Map::<String, Value>::deserialize(d)?;
                let mut parts = split_section::<D::Error>($name, map, &[$(keys_of::<$fty>()),+])?.into_iter();
                Ok(Self {
                    $($field: serde_json::from_value(Value::Object(parts.next().unwrap())).map_err(D::Error::custom)?),+
                })
            }
        }
    };
}

flat_section!(DataSection, "data", scene: SceneConfig, sizes: DataSizes);
flat_section!(VlmSection, "vlm", model: VlmConfig, pretrain: PretrainConfig);
flat_section!(DetectorSection, "detector", model: DetectorConfig, loss: LossConfig, train: DetectorTrainConfig);

/// Set `key` (dotted path) in a config document. The value is parsed as
/// JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {} is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*p) {
            return Err(Error::Config(format!("override {key}: unknown key {p:?}")));
        }
        cur = obj.get_mut(*p).unwrap();
    }
    *cur = value;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let loaded: Self = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            doc = serde_json::to_value(loaded).expect("config serializes");
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            apply_override(&mut doc, k.trim(), v.trim())?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.vlm.model.validate()?;
        self.detector.model.validate()?;
        self.detector.loss.validate()?;
        self.detector.train.validate()?;
        self.fusion.validate()?;
        if self.data.scene.image_size != self.vlm.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from vlm.image_size {}",
                self.data.scene.image_size, self.vlm.model.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.data.sizes.novel_fraction) {
            return Err(Error::Config("data.novel_fraction must lie in [0, 1)".into()));
        }
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be positive".into()));
        }
        if self.probe.k == 0 {
            return Err(Error::Config("probe.k must be positive".into()));
        }
        Ok(())
    }

    /// Scene configuration of the transfer vocabulary.
    pub fn transfer_scene(&self) -> SceneConfig {
        SceneConfig {
            colors: self.eval.transfer_colors.clone(),
            shapes: self.eval.transfer_shapes.clone(),
            ..self.data.scene.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_parts_do_not_share_keys() {
        for parts in [
            vec![keys_of::<SceneConfig>(), keys_of::<DataSizes>()],
            vec![keys_of::<VlmConfig>(), keys_of::<PretrainConfig>()],
            vec![keys_of::<DetectorConfig>(), keys_of::<LossConfig>(), keys_of::<DetectorTrainConfig>()],
        ] {
            let all: Vec<&String> = parts.iter().flatten().collect();
            let uniq: std::collections::BTreeSet<&String> = all.iter().copied().collect();
            assert_eq!(all.len(), uniq.len(), "{all:?}");
        }
    }

    #[test]
    fn round_trip_and_overrides() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let o = RunConfig::resolve(
            None,
            &[
                "detector.backbone_lr=1e-3".into(),
                "detector.fpn_repeats=4".into(),
                "fusion.kind=arithmetic".into(),
                "vlm.steps=10".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(o.detector.loss.backbone_lr, 1e-3);
        assert_eq!(o.detector.model.fpn_repeats, 4);
        assert_eq!(o.fusion.kind, crate::fusion::FusionKind::Arithmetic);
        assert_eq!(o.vlm.pretrain.steps, 10);
        assert_eq!(o.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(None, &["detector.nope=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nope=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["seed".into()]).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"detector": {"fpn_repeat": 2}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"vlm": {"image_size": 128, "bogus": 1}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"detector": {"steps": 5}}"#).unwrap();
        assert_eq!(partial.detector.train.steps, 5);
        assert_eq!(partial.detector.model, DetectorConfig::default());
    }

    #[test]
    fn resolved_file_reproduces_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(None, &["fusion.beta=0.5".into()]).unwrap();
        let p = dir.path().join("config.resolved.json");
        std::fs::write(&p, cfg.to_json()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap(), cfg);
        assert!(RunConfig::resolve(None, &["vlm.image_size=96".into()]).is_err());
    }
}
