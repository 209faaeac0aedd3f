//! 8-bit RGB rasters, PNG I/O and the pixel preprocessing shared by
//! pretraining and detection.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel normalization applied before the image encoder.
pub const PIXEL_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
pub const PIXEL_STD: [f32; 3] = [0.25, 0.25, 0.25];

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let img_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(img_err)?;
        writer.write_image_data(&self.data).map_err(img_err)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let img_err = |e: png::DecodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut decoder = png::Decoder::new(file);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(img_err)?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(img_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => buf[..w * h * 4]
                .chunks(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => {
                buf[..w * h * 2].chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            other => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    message: format!("unsupported color type {other:?}"),
                })
            }
        };
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Stack images into a normalized NHWC batch.
pub fn to_batch<R: Real>(images: &[&RgbImage]) -> Result<Tensor<R>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                w, h, img.width, img.height
            )));
        }
        for px in img.data.chunks(3) {
            for c in 0..3 {
                let v = (px[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                data.push(R::from_f32(v).unwrap());
            }
        }
    }
    Ok(Tensor::new(&[images.len(), h, w, 3], data))
}
