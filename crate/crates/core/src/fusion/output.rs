use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxRegion;
use crate::image::RgbImage;
use crate::synthdata::{BinaryMask, Rle};

use super::detect::Detection;

/// One entry of a COCO results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: usize,
    pub category_id: usize,
    /// `[x, y, width, height]`
    pub bbox: [f32; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Rle>,
}

pub fn to_coco_results(image_id: usize, detections: &[Detection], width: usize, height: usize) -> Vec<CocoResult> {
    detections
        .iter()
        .map(|d| CocoResult {
            image_id,
            category_id: d.category_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
            segmentation: d.binary_mask(width, height).map(|m| m.to_rle()),
        })
        .collect()
}

pub fn write_results(path: &Path, results: &[CocoResult]) -> Result<()> {
    crate::synthdata::write_json(path, &results)
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    crate::synthdata::read_json(path)
}

fn palette(category_id: usize) -> [u8; 3] {
    const P: [[u8; 3]; 10] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
    ];
    P[category_id % P.len()]
}

fn draw_rect(im: &mut RgbImage, b: &BoxRegion, rgb: [u8; 3]) {
    let clampx = |v: f32| (v.max(0.0) as usize).min(im.width.saturating_sub(1));
    let clampy = |v: f32| (v.max(0.0) as usize).min(im.height.saturating_sub(1));
    let (x0, x1) = (clampx(b.x0), clampx(b.x1 - 1.0));
    let (y0, y1) = (clampy(b.y0), clampy(b.y1 - 1.0));
    for x in x0..=x1 {
        im.put(x, y0, rgb);
        im.put(x, y1, rgb);
    }
    for y in y0..=y1 {
        im.put(x0, y, rgb);
        im.put(x1, y, rgb);
    }
}

/// Draw every result of `image_id` scoring at least `min_score`: masks
/// blended at 50%, boxes as one-pixel outlines, colored by category.
pub fn render_overlay(image: &RgbImage, image_id: usize, results: &[CocoResult], min_score: f64) -> Result<RgbImage> {
    let mut out = image.clone();
    for r in results.iter().filter(|r| r.image_id == image_id && r.score >= min_score) {
        let rgb = palette(r.category_id);
        if let Some(rle) = &r.segmentation {
            let m = BinaryMask::from_rle(rle).map_err(Error::Invalid)?;
            if m.width != image.width || m.height != image.height {
                return Err(Error::Shape(format!(
                    "segmentation is {}x{}, image is {}x{}",
                    m.width, m.height, image.width, image.height
                )));
            }
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.get(x, y) {
                        let p = out.get(x, y);
                        out.put(x, y, std::array::from_fn(|c| ((p[c] as u16 + rgb[c] as u16) / 2) as u8));
                    }
                }
            }
        }
        draw_rect(&mut out, &BoxRegion::from_xywh(r.bbox), rgb);
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &RgbImage, image_id: usize, results: &[CocoResult], min_score: f64) -> Result<()> {
    render_overlay(image, image_id, results, min_score)?.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn results_round_trip_and_render() {
        let det = Detection {
            bbox: BoxRegion::new(4.0, 4.0, 12.0, 10.0),
            category_id: 3,
            score: 0.75,
            mask: Some(Tensor::full(&[28, 28], 2.0)),
        };
        let res = to_coco_results(7, &[det], 16, 16);
        assert_eq!(res[0].bbox, [4.0, 4.0, 8.0, 6.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("detections.json");
        write_results(&p, &res).unwrap();
        assert_eq!(read_results(&p).unwrap(), res);
        let im = RgbImage::filled(16, 16, [0, 0, 0]);
        let ov = render_overlay(&im, 7, &res, 0.5).unwrap();
        assert_eq!(ov.get(4, 4), palette(3));
        assert_eq!(ov.get(6, 6), palette(3).map(|c| c / 2));
        assert_eq!(ov.get(0, 0), [0, 0, 0]);
        assert_eq!(render_overlay(&im, 7, &res, 0.9).unwrap(), im);
        write_overlay(&dir.path().join("o.png"), &im, 7, &res, 0.0).unwrap();
    }
}
