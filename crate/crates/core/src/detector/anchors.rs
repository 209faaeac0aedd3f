use crate::geometry::BoxRegion;

/// Anchors of one pyramid level, indexed `(y * W + x) * A + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub per_cell: usize,
    pub boxes: Vec<BoxRegion>,
    /// False for anchors with no overlap with the image; those never become
    /// proposals or training samples.
    pub inside: Vec<bool>,
}

impl LevelAnchors {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// One square size per level; `ratios` are height / width.
pub fn level_anchors(
    stride: usize,
    grid: (usize, usize),
    size: f32,
    ratios: &[f32],
    image: (usize, usize),
) -> LevelAnchors {
    let (height, width) = grid;
    let frame = BoxRegion::whole(image.0, image.1);
    let mut boxes = Vec::with_capacity(height * width * ratios.len());
    for y in 0..height {
        for x in 0..width {
            let cx = (x as f32 + 0.5) * stride as f32;
            let cy = (y as f32 + 0.5) * stride as f32;
            for &r in ratios {
                let w = size / r.sqrt();
                let h = size * r.sqrt();
                boxes.push(BoxRegion::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
            }
        }
    }
    let inside = boxes.iter().map(|b| b.intersection(&frame) > 0.0).collect();
    LevelAnchors {
        stride,
        height,
        width,
        per_cell: ratios.len(),
        boxes,
        inside,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_shapes() {
        let a = level_anchors(8, (2, 3), 16.0, &[0.5, 1.0, 2.0], (24, 16));
        assert_eq!(a.len(), 18);
        // cell (y=1, x=2), ratio 1
        let b = a.boxes[(3 + 2) * 3 + 1];
        assert_eq!(b, BoxRegion::new(12.0, 4.0, 28.0, 20.0));
        for (i, b) in a.boxes.iter().enumerate() {
            assert!((b.area() - 256.0).abs() < 1e-2, "{i}");
        }
        let tall = a.boxes[2];
        assert!(tall.height() > tall.width());
        assert!(a.inside.iter().all(|&v| v));
    }

    #[test]
    fn anchors_outside_the_image_are_flagged() {
        // A 4x4 grid at stride 8 over a 12x12 image: the last column of
        // cells is centred at 28 and its 8-pixel anchors end before x = 12.
        let a = level_anchors(8, (4, 4), 8.0, &[1.0], (12, 12));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(a.inside[y * 4 + x], x < 2 && y < 2, "({y}, {x})");
            }
        }
    }
}
