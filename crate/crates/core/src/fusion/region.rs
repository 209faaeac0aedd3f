use crate::detector::{roi_align_plan, RoiRequest};
use crate::error::{Error, Result};
use crate::geometry::BoxRegion;
use crate::tensor::Tensor;
use crate::vlm::{cosine_logits, normalize, softmax_temperature, FeatureGrid, VlmModel, VocabularyEmbedding};

/// Cosine similarities `[n, |C|+1]` between the pooled VLM region
/// embeddings v_b of `boxes` and every vocabulary row.
///
/// Each box is ROI-aligned on the top-level grid to the pooler's G×G input,
/// attention-pooled and unit-normalized.
pub fn vlm_region_cosines(
    vlm: &VlmModel<f32>,
    top_grid: &FeatureGrid<f32>,
    boxes: &[BoxRegion],
    vocab: &VocabularyEmbedding,
) -> Result<Vec<Vec<f32>>> {
    if vocab.dim() != vlm.config.embed_dim {
        return Err(Error::Shape(format!(
            "vocabulary has {} dims, the VLM embeds to {}",
            vocab.dim(),
            vlm.config.embed_dim
        )));
    }
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let g = vlm.config.pool_grid();
    let (h, w, c) = (top_grid.height(), top_grid.width(), top_grid.channels());
    let rois: Vec<RoiRequest> = boxes.iter().map(|&bbox| RoiRequest { batch_index: 0, bbox }).collect();
    let plan = roi_align_plan::<f32>(&rois, 1, h, w, top_grid.stride, g)?;
    let crops = Tensor::new(&[boxes.len(), g, g, c], plan.apply(top_grid.values.data(), c));
    let pooled = vlm.pool_grids(crops)?;
    Ok((0..boxes.len())
        .map(|i| {
            let mut v = pooled.row(i).to_vec();
            normalize(&mut v);
            cosine_logits(&v, vocab)
        })
        .collect())
}

/// VLM scores w: `softmax(cos(v_b, t) / temperature)` over every vocabulary
/// row (background included) for each box.
pub fn vlm_region_scores(
    vlm: &VlmModel<f32>,
    top_grid: &FeatureGrid<f32>,
    boxes: &[BoxRegion],
    vocab: &VocabularyEmbedding,
    temperature: f32,
) -> Result<Vec<Vec<f32>>> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("VLM temperature must be positive, got {temperature}")));
    }
    Ok(vlm_region_cosines(vlm, top_grid, boxes, vocab)?
        .iter()
        .map(|l| softmax_temperature(l, temperature))
        .collect())
}
