//! RGB images in `[0, 1]`, masks, and their on-disk forms (8-bit PNG plus a
//! raw little-endian `f32` dump used where metrics need exact values).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"AVF1";

/// Row-major `H × W × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::SizeMismatch(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luminance with weights 0.299 / 0.587 / 0.114, row-major `H × W`.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Raw dump: magic, `u32` width, `u32` height, then `f32` values.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(RAW_MAGIC)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(self.height as u32)?;
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RAW_MAGIC {
            return Err(Error::Dataset("not a raw image dump".into()));
        }
        let w = r.read_u32::<LittleEndian>()? as usize;
        let h = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0f32; w * h * 3];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        Self::new(w, h, data.into_iter().map(f64::from).collect())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn from_alpha(width: usize, height: usize, alpha: &[f64]) -> Self {
        Self {
            width,
            height,
            data: alpha.iter().map(|&a| a > 0.5).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|b| b >= 128).collect(),
        })
    }
}

/// Writes a scalar map as grayscale, scaled so `max` maps to white.
pub fn write_gray_png(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64], max: f64) -> Result<()> {
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v * scale)).collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_dump_roundtrips_f32() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 1.0]).unwrap();
        let p = dir.path().join("a.bin");
        img.write_raw(&p).unwrap();
        let back = Image::read_raw(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn png_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(3, 2, [0.0, 0.5, 1.0]);
        let p = dir.path().join("a.png");
        img.write_png(&p).unwrap();
        let back = Image::read_png(&p).unwrap();
        assert_eq!(back.pixel(2, 1), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn mask_threshold_is_strict() {
        let m = Mask::from_alpha(3, 1, &[0.5, 0.51, 0.0]);
        assert_eq!(m.data, vec![false, true, false]);
    }
}
