//! Grayscale image patches with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image. Pixel `(i, j)` is column `i`, row `j`, and its
/// center sits at continuous coordinate `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(width: usize, height: usize) -> Self {
        Patch {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} pixels for a {width}x{height} patch", data.len())));
        }
        Ok(Patch { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Patch { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[j * self.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[j * self.width + i] = v;
    }

    /// Bilinear sample at continuous coordinates, clamped to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let i0 = fx.floor() as usize;
        let j0 = fy.floor() as usize;
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let tx = (fx - i0 as f64) as f32;
        let ty = (fy - j0 as f64) as f32;
        let top = self.get(i0, j0) * (1.0 - tx) + self.get(i1, j0) * tx;
        let bottom = self.get(i0, j1) * (1.0 - tx) + self.get(i1, j1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Horizontal mirror: continuous `x` maps to `width - x`.
    pub fn mirrored(&self) -> Patch {
        Patch::from_fn(self.width, self.height, |i, j| self.get(self.width - 1 - i, j))
    }

    /// Crops `[x0, x0 + w) x [y0, y0 + h)` (continuous coordinates) and
    /// resamples it back to this patch's size.
    pub fn resized_crop(&self, x0: f64, y0: f64, w: f64, h: f64) -> Patch {
        let sx = w / self.width as f64;
        let sy = h / self.height as f64;
        Patch::from_fn(self.width, self.height, |i, j| {
            self.sample_bilinear(x0 + (i as f64 + 0.5) * sx, y0 + (j as f64 + 0.5) * sy)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Patch) -> f32 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// Quantizes to 8 bits, exactly as a PNG round trip would.
    pub fn quantized(&self) -> Patch {
        Patch {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes).ok_or_else(|| Error::Shape("png buffer size".into()))?;
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::ImageLoad {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Loads any supported image and converts it to luma.
    pub fn load(path: &Path) -> Result<Patch> {
        let img = image::open(path)
            .map_err(|e| Error::ImageLoad {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Patch::from_vec(w as usize, h as usize, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
