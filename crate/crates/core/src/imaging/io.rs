//! PNG codecs: RGB images as 8-bit, masks as 8-bit `{0, 255}`, normalized
//! depth as 16-bit with `v ↦ round((v + 1) / 2 · 65535)`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use super::{BinaryMask, DepthMap, ImageRGB, Normalization, ValueRange};
use crate::error::{Error, Result};

pub fn quantize_depth(v: f64) -> u16 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16
}

pub fn dequantize_depth(q: u16) -> f64 {
    f64::from(q) / 65535.0 * 2.0 - 1.0
}

impl ImageRGB {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let unit = self.to_unit();
        let (h, w) = (unit.height() as u32, unit.width() as u32);
        let img = RgbImage::from_fn(w, h, |x, y| {
            let p = unit.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v * 255.0).round() as u8))
        });
        img.save(path)?;
        Ok(())
    }

    /// Loads any PNG as an 8-bit RGB image in the unit range.
    pub fn load_png(path: &Path) -> Result<ImageRGB> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        ImageRGB::new(data, ValueRange::Unit)
    }
}

impl DepthMap {
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        if !self.is_normalized() {
            return Err(Error::validation("only normalized depth maps can be stored"));
        }
        let (h, w) = (self.height() as u32, self.width() as u32);
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quantize_depth(self.data()[[y as usize, x as usize]])])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn load_png16(path: &Path, normalization: Normalization) -> Result<DepthMap> {
        let img = image::open(path)?.to_luma16();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            dequantize_depth(img.get_pixel(x as u32, y as u32)[0])
        });
        DepthMap::new(data, normalization)
    }
}

impl BinaryMask {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let img = GrayImage::from_fn(w, h, |x, y| Luma([self.data()[[y as usize, x as usize]] * 255]));
        img.save(path)?;
        Ok(())
    }

    /// Values at or above 128 read as 1.
    pub fn load_png(path: &Path) -> Result<BinaryMask> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
        });
        BinaryMask::new(data)
    }
}
