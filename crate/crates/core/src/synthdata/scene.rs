use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxRegion;
use crate::image::RgbImage;
use crate::seed::rng;

use super::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Star => "star",
        }
    }

    /// Whether the point `(u, v)`, in units of half the object size relative
    /// to its center (y pointing down), lies inside the shape.
    pub fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= 0.5 * (v + 1.0),
            Shape::Cross => {
                let arm = 1.0 / 3.0;
                (u.abs() <= arm && v.abs() <= 1.0) || (v.abs() <= arm && u.abs() <= 1.0)
            }
            Shape::Star => point_in_polygon(u, v, &star_polygon()),
        }
    }
}

fn star_polygon() -> [(f32, f32); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (i, p) in pts.iter_mut().enumerate() {
        let r = if i % 2 == 0 { 1.0 } else { 0.45 };
        let theta = -std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::PI / 5.0;
        *p = (r * theta.cos(), r * theta.sin());
    }
    pts
}

fn point_in_polygon(x: f32, y: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [215, 35, 35],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [235, 215, 40],
            Color::Purple => [140, 60, 190],
            Color::Orange => [245, 135, 25],
        }
    }
}

/// Scene backgrounds are drawn from colors disjoint from the object palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    Gray,
    White,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Black, Background::Gray, Background::White];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::Black => [25, 25, 25],
            Background::Gray => [120, 120, 120],
            Background::White => [235, 235, 235],
        }
    }
}

pub fn category_name(color: Color, shape: Shape) -> String {
    format!("{} {}", color.name(), shape.name())
}

/// Parse `"<color> <shape>"`.
pub fn parse_category(name: &str) -> Option<(Color, Shape)> {
    let (c, s) = name.trim().split_once(' ')?;
    let color = Color::ALL.into_iter().find(|x| x.name() == c)?;
    let shape = Shape::ALL.into_iter().find(|x| x.name() == s)?;
    Some((color, shape))
}

/// The full 30-name vocabulary, color-major.
pub fn all_category_names() -> Vec<String> {
    Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| category_name(c, s)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    /// Center in pixels.
    pub center: (f32, f32),
    /// Full extent in pixels.
    pub size: f32,
    pub z_order: i32,
}

impl ObjectSpec {
    pub fn category(&self) -> String {
        category_name(self.color, self.shape)
    }

    pub fn extent(&self) -> BoxRegion {
        let h = 0.5 * self.size;
        BoxRegion::new(
            self.center.0 - h,
            self.center.1 - h,
            self.center.0 + h,
            self.center.1 + h,
        )
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let h = 0.5 * self.size;
        self.shape
            .contains((x - self.center.0) / h, (y - self.center.1) / h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    pub image_size: usize,
}

/// Knobs for scene sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub max_objects: usize,
    pub min_object_size: f32,
    pub max_object_size: f32,
    /// Restrict the palette (empty = all six colors).
    pub colors: Vec<Color>,
    /// Restrict the shapes (empty = all five).
    pub shapes: Vec<Shape>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            max_objects: 5,
            min_object_size: 14.0,
            max_object_size: 40.0,
            colors: Vec::new(),
            shapes: Vec::new(),
        }
    }
}

pub const MARGIN: f32 = 2.0;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::Config(format!(
                "image_size {} is below the minimum of 64 (backbone stride 32)",
                self.image_size
            )));
        }
        if self.max_objects < 1 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        if !(self.min_object_size > 2.0 && self.min_object_size <= self.max_object_size) {
            return Err(Error::Config("object size range is empty".into()));
        }
        if self.max_object_size + 2.0 * MARGIN > self.image_size as f32 {
            return Err(Error::Config("objects do not fit inside the image".into()));
        }
        Ok(())
    }

    pub fn palette(&self) -> Vec<Color> {
        if self.colors.is_empty() {
            Color::ALL.to_vec()
        } else {
            self.colors.clone()
        }
    }

    pub fn shape_set(&self) -> Vec<Shape> {
        if self.shapes.is_empty() {
            Shape::ALL.to_vec()
        } else {
            self.shapes.clone()
        }
    }

    /// Category names this configuration can produce, color-major.
    pub fn category_names(&self) -> Vec<String> {
        let shapes = self.shape_set();
        self.palette()
            .iter()
            .flat_map(|&c| shapes.iter().map(move |&s| category_name(c, s)))
            .collect()
    }
}

/// One rendered instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub bbox: BoxRegion,
    pub mask: BinaryMask,
    /// Index into `SceneSpec::objects`.
    pub object_index: usize,
    pub category: String,
}

/// Sample a scene from `seed`.
pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut r = rng(seed);
    let palette = config.palette();
    let shapes = config.shape_set();
    let n = r.gen_range(1..=config.max_objects);
    let s = config.image_size as f32;
    let objects = (0..n)
        .map(|i| {
            let size = r.gen_range(config.min_object_size..=config.max_object_size);
            let lo = MARGIN + 0.5 * size;
            let hi = s - MARGIN - 0.5 * size;
            ObjectSpec {
                shape: *shapes.choose(&mut r).unwrap(),
                color: *palette.choose(&mut r).unwrap(),
                center: (r.gen_range(lo..=hi), r.gen_range(lo..=hi)),
                size,
                z_order: i as i32,
            }
        })
        .collect();
    Ok(SceneSpec {
        objects,
        background: *Background::ALL.choose(&mut r).unwrap(),
        image_size: config.image_size,
    })
}

/// Render with 2x2 supersampling. Each pixel's color is the average of its
/// subsamples; an object's mask keeps the pixels where it is topmost in at
/// least half of the subsamples. Objects with no visible pixel are dropped.
pub fn render_scene(spec: &SceneSpec) -> (RgbImage, Vec<InstanceAnnotation>) {
    let size = spec.image_size;
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    // Painter's order: higher z drawn later; ties keep list order.
    order.sort_by_key(|&i| (spec.objects[i].z_order, i));
    let mut img = RgbImage::new(size, size);
    let mut masks: Vec<BinaryMask> = vec![BinaryMask::new(size, size); spec.objects.len()];
    let bg = spec.background.rgb();
    const OFFSETS: [f32; 2] = [0.25, 0.75];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0u32; 3];
            let mut hits = [0u8; 8];
            let mut hit_ids = [usize::MAX; 8];
            let mut n_ids = 0;
            for oy in OFFSETS {
                for ox in OFFSETS {
                    let (px, py) = (x as f32 + ox, y as f32 + oy);
                    let top = order
                        .iter()
                        .rev()
                        .copied()
                        .find(|&i| spec.objects[i].contains(px, py));
                    let rgb = match top {
                        Some(i) => {
                            match hit_ids[..n_ids].iter().position(|&k| k == i) {
                                Some(p) => hits[p] += 1,
                                None if n_ids < hit_ids.len() => {
                                    hit_ids[n_ids] = i;
                                    hits[n_ids] = 1;
                                    n_ids += 1;
                                }
                                None => {}
                            }
                            spec.objects[i].color.rgb()
                        }
                        None => bg,
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c] as u32;
                    }
                }
            }
            img.put(
                x,
                y,
                [
                    ((acc[0] + 2) / 4) as u8,
                    ((acc[1] + 2) / 4) as u8,
                    ((acc[2] + 2) / 4) as u8,
                ],
            );
            for k in 0..n_ids {
                if hits[k] >= 2 {
                    masks[hit_ids[k]].set(x, y, true);
                }
            }
        }
    }
    let annotations = masks
        .into_iter()
        .enumerate()
        .filter_map(|(i, mask)| {
            let bbox = mask.tight_box()?;
            Some(InstanceAnnotation {
                bbox,
                mask,
                object_index: i,
                category: spec.objects[i].category(),
            })
        })
        .collect();
    (img, annotations)
}

/// `sample_scene` followed by `render_scene`.
pub fn generate_scene(
    seed: u64,
    config: &SceneConfig,
) -> Result<(SceneSpec, RgbImage, Vec<InstanceAnnotation>)> {
    let spec = sample_scene(seed, config)?;
    let (img, anns) = render_scene(&spec);
    Ok((spec, img, anns))
}
