use crate::autograd::ResamplePlan;
use crate::error::{Error, Result};
use crate::geometry::BoxRegion;
use crate::tensor::{Real, Tensor};
use crate::vlm::FeatureGrid;

/// Where one box sits in a batched `[B, H, W, C]` feature map.
#[derive(Clone, Copy, Debug)]
pub struct RoiRequest {
    pub batch_index: usize,
    pub bbox: BoxRegion,
}

/// Bilinear weights at continuous cell coordinate `(y, x)` (cell centers at
/// integers), following the usual ROI-Align border rules.
fn bilinear(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let (y0, x0);
    let (y1, x1);
    if y as usize >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y0 = y as usize;
        y1 = y0 + 1;
    }
    if x as usize >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x0 = x as usize;
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ])
}

/// Sparse ROI-Align map from a `[B, H, W, C]` map (stride `stride`) to
/// `[len(rois), out, out, C]`.
///
/// Aligned convention: box edges are shifted by half a cell, so cell centers
/// sit at integer coordinates. Each output bin averages `ceil(bin extent)`
/// bilinear samples per axis (at least one), which makes the whole-image box
/// at `out == H == W` an exact copy of the grid.
pub fn roi_align_plan<R: Real>(
    rois: &[RoiRequest],
    batch: usize,
    h: usize,
    w: usize,
    stride: usize,
    out: usize,
) -> Result<ResamplePlan<R>> {
    let mut entries = Vec::new();
    let scale = 1.0 / stride as f64;
    for (r, roi) in rois.iter().enumerate() {
        let b = roi.bbox;
        if !(b.width() > 0.0 && b.height() > 0.0) || !b.is_valid() {
            return Err(Error::Invalid(format!("degenerate ROI box {b:?}")));
        }
        if roi.batch_index >= batch {
            return Err(Error::Invalid(format!("ROI batch index {} >= {batch}", roi.batch_index)));
        }
        let x0 = b.x0 as f64 * scale - 0.5;
        let y0 = b.y0 as f64 * scale - 0.5;
        let rw = (b.x1 - b.x0) as f64 * scale;
        let rh = (b.y1 - b.y0) as f64 * scale;
        let (bw, bh) = (rw / out as f64, rh / out as f64);
        let nx = bw.ceil().max(1.0) as usize;
        let ny = bh.ceil().max(1.0) as usize;
        let inv = 1.0 / (nx * ny) as f64;
        let base = roi.batch_index * h * w;
        for oy in 0..out {
            for ox in 0..out {
                let dst = ((r * out + oy) * out + ox) as u32;
                for sy in 0..ny {
                    let y = y0 + (oy as f64 + (sy as f64 + 0.5) / ny as f64) * bh;
                    for sx in 0..nx {
                        let x = x0 + (ox as f64 + (sx as f64 + 0.5) / nx as f64) * bw;
                        if let Some(taps) = bilinear(y, x, h, w) {
                            for (yy, xx, wt) in taps {
                                if wt != 0.0 {
                                    let src = (base + yy * w + xx) as u32;
                                    entries.push((dst, src, R::from_f64_lossy(wt * inv)));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ResamplePlan {
        out_rows: rois.len() * out * out,
        in_rows: batch * h * w,
        entries,
    })
}

/// ROI-Align of one box on one grid; returns `[out, out, C]`.
pub fn roi_align<R: Real>(grid: &FeatureGrid<R>, bbox: BoxRegion, out: usize) -> Result<Tensor<R>> {
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let plan = roi_align_plan::<R>(&[RoiRequest { batch_index: 0, bbox }], 1, h, w, grid.stride, out)?;
    Ok(Tensor::new(&[out, out, c], plan.apply(grid.values.data(), c)))
}
