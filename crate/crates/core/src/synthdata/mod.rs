//! Synthetic shape scenes, captions, vocabulary splits and dataset files.

mod caption;
mod coco;
mod mask;
mod scene;
mod split;

pub use caption::{caption_of, CAPTION_TEMPLATES};
pub use coco::{
    build_caption_dataset, build_detection_dataset, read_caption_dataset, read_dataset,
    write_caption_dataset, write_dataset, Annotation, CaptionDataset, DetectionDataset,
    DetectionSample, ANNOTATIONS_FILE, CAPTIONS_FILE, SPLIT_FILE,
};
pub use coco::{read_json, write_json};
pub use mask::{BinaryMask, Rle};
pub use scene::{
    all_category_names, category_name, generate_scene, parse_category, render_scene,
    sample_scene, Background, Color, InstanceAnnotation, ObjectSpec, SceneConfig, SceneSpec,
    Shape, MARGIN,
};
pub use split::{split_vocabulary, SplitFile, VocabularySplit};
