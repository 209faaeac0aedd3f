//! Test-time open-vocabulary scoring: VLM region scores on the frozen top
//! grid, geometric (or arithmetic) fusion with the detector scores, and the
//! full detection pipeline.

mod detect;
mod output;
mod region;
mod score;

pub use detect::{
    detect, paste_mask, predict_raw, rank_detections, swap_vocabulary, Detection, RankedBox, RawPrediction,
};
pub use output::{read_results, render_overlay, to_coco_results, write_overlay, write_results, CocoResult};
pub use region::{vlm_region_cosines, vlm_region_scores};
pub use score::{fuse_scores, softmax_t, FusionKind, FusionParams, Fuser};
