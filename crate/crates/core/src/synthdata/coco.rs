//! COCO-style serialization of the detection and caption datasets.
//!
//! Layout of a detection dataset directory:
//! `annotations.json` (COCO "images"/"annotations"/"categories"),
//! `vocab_split.json` and `images/<id>.png`. A caption dataset directory holds
//! `captions.json` and `images/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxRegion;
use crate::image::RgbImage;
use crate::seed::derive_seed;

use super::caption::caption_of;
use super::mask::{BinaryMask, Rle};
use super::scene::{generate_scene, SceneConfig};
use super::split::{SplitFile, VocabularySplit};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SPLIT_FILE: &str = "vocab_split.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BoxRegion,
    pub mask: BinaryMask,
    /// 1-based id into the dataset's category list.
    pub category_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub id: usize,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDataset {
    pub split: VocabularySplit,
    pub samples: Vec<DetectionSample>,
}

impl DetectionDataset {
    pub fn categories(&self) -> &[String] {
        &self.split.all_categories
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.samples.iter().map(|s| s.annotations.len()).sum()
    }

    /// Drop annotations outside `keep`; the objects stay in the pixels and
    /// count as background.
    pub fn restricted_to(&self, keep: &std::collections::BTreeSet<usize>) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| DetectionSample {
                id: s.id,
                image: s.image.clone(),
                annotations: s
                    .annotations
                    .iter()
                    .filter(|a| keep.contains(&a.category_id))
                    .cloned()
                    .collect(),
            })
            .collect();
        Self {
            split: self.split.clone(),
            samples,
        }
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Self {
        Self {
            split: self.split.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

/// Render `n` scenes; scene `i` uses `derive_seed(seed, "scene", i)`.
pub fn build_detection_dataset(
    config: &SceneConfig,
    split: VocabularySplit,
    n: usize,
    seed: u64,
) -> Result<DetectionDataset> {
    let names = config.category_names();
    if names != split.all_categories {
        return Err(Error::Vocabulary(
            "split categories differ from the scene configuration's".into(),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let (_, image, anns) = generate_scene(derive_seed(seed, "scene", i as u64), config)?;
        let annotations = anns
            .into_iter()
            .map(|a| Annotation {
                category_id: split.id_of(&a.category).expect("category of configured palette"),
                bbox: a.bbox,
                mask: a.mask,
            })
            .collect();
        samples.push(DetectionSample {
            id: i + 1,
            image,
            annotations,
        });
    }
    Ok(DetectionDataset { split, samples })
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    /// `[x, y, w, h]`
    bbox: [f32; 4],
    area: usize,
    iscrowd: u8,
    segmentation: Rle,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
    supercategory: String,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn image_file(id: usize) -> String {
    format!("{IMAGE_DIR}/{id:06}.png")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_dataset(ds: &DetectionDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for s in &ds.samples {
        let file_name = image_file(s.id);
        s.image.save_png(&dir.join(&file_name))?;
        images.push(CocoImage {
            id: s.id,
            file_name,
            width: s.image.width,
            height: s.image.height,
        });
        for a in &s.annotations {
            annotations.push(CocoAnnotation {
                id: annotations.len() + 1,
                image_id: s.id,
                category_id: a.category_id,
                bbox: a.bbox.to_xywh(),
                area: a.mask.area(),
                iscrowd: 0,
                segmentation: a.mask.to_rle(),
            });
        }
    }
    let categories = ds
        .categories()
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i + 1,
            name: name.clone(),
            supercategory: name.rsplit(' ').next().unwrap_or_default().to_string(),
        })
        .collect();
    write_json(
        &dir.join(ANNOTATIONS_FILE),
        &CocoFile {
            images,
            annotations,
            categories,
        },
    )?;
    write_json(&dir.join(SPLIT_FILE), &SplitFile::from_split(&ds.split))
}

pub fn read_dataset(dir: &Path) -> Result<DetectionDataset> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let coco: CocoFile = read_json(&ann_path)?;
    let bad = |index: usize, message: String| Error::Dataset {
        path: ann_path.clone(),
        index,
        message,
    };
    let mut categories = Vec::with_capacity(coco.categories.len());
    for (i, c) in coco.categories.iter().enumerate() {
        if c.id != i + 1 {
            return Err(bad(i, format!("category id {} out of order (expected {})", c.id, i + 1)));
        }
        categories.push(c.name.clone());
    }
    let split_file: SplitFile = read_json(&dir.join(SPLIT_FILE))?;
    let split = split_file.to_split(&categories).map_err(|e| Error::Dataset {
        path: dir.join(SPLIT_FILE),
        index: 0,
        message: e.to_string(),
    })?;

    let mut samples: Vec<DetectionSample> = Vec::with_capacity(coco.images.len());
    let mut slot = std::collections::HashMap::new();
    for (i, im) in coco.images.iter().enumerate() {
        let path = dir.join(&im.file_name);
        if !path.exists() {
            return Err(bad(i, format!("missing image file {}", path.display())));
        }
        let image = RgbImage::load_png(&path)?;
        if (image.width, image.height) != (im.width, im.height) {
            return Err(bad(i, format!(
                "image {} is {}x{}, record says {}x{}",
                im.file_name, image.width, image.height, im.width, im.height
            )));
        }
        if slot.insert(im.id, samples.len()).is_some() {
            return Err(bad(i, format!("duplicate image id {}", im.id)));
        }
        samples.push(DetectionSample {
            id: im.id,
            image,
            annotations: Vec::new(),
        });
    }
    for (i, a) in coco.annotations.iter().enumerate() {
        if a.category_id == 0 || a.category_id > categories.len() {
            return Err(bad(i, format!("unknown category_id {}", a.category_id)));
        }
        let &s = slot
            .get(&a.image_id)
            .ok_or_else(|| bad(i, format!("unknown image_id {}", a.image_id)))?;
        let mask = BinaryMask::from_rle(&a.segmentation).map_err(|m| bad(i, m))?;
        let bbox = BoxRegion::from_xywh(a.bbox);
        if mask.tight_box() != Some(bbox) {
            return Err(bad(i, "bbox is not the tight box of the mask".into()));
        }
        samples[s].annotations.push(Annotation {
            bbox,
            mask,
            category_id: a.category_id,
        });
    }
    Ok(DetectionDataset { split, samples })
}

/// Image-caption pairs for contrastive pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionDataset {
    pub images: Vec<RgbImage>,
    pub captions: Vec<String>,
}

impl CaptionDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn build_caption_dataset(config: &SceneConfig, n: usize, seed: u64) -> Result<CaptionDataset> {
    let mut images = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for i in 0..n {
        let (spec, image, _) = generate_scene(derive_seed(seed, "caption-scene", i as u64), config)?;
        captions.push(caption_of(&spec, derive_seed(seed, "caption", i as u64)));
        images.push(image);
    }
    Ok(CaptionDataset { images, captions })
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    file_name: String,
    caption: String,
}

pub fn write_caption_dataset(ds: &CaptionDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, (im, cap)) in ds.images.iter().zip(&ds.captions).enumerate() {
        let file_name = image_file(i + 1);
        im.save_png(&dir.join(&file_name))?;
        records.push(CaptionRecord {
            file_name,
            caption: cap.clone(),
        });
    }
    write_json(&dir.join(CAPTIONS_FILE), &records)
}

pub fn read_caption_dataset(dir: &Path) -> Result<CaptionDataset> {
    let path: PathBuf = dir.join(CAPTIONS_FILE);
    let records: Vec<CaptionRecord> = read_json(&path)?;
    let mut images = Vec::with_capacity(records.len());
    let mut captions = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let p = dir.join(&r.file_name);
        if !p.exists() {
            return Err(Error::Dataset {
                path: path.clone(),
                index: i,
                message: format!("missing image file {}", p.display()),
            });
        }
        images.push(RgbImage::load_png(&p)?);
        captions.push(r.caption);
    }
    Ok(CaptionDataset { images, captions })
}
