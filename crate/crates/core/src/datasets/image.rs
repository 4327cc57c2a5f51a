use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width * height * 3) as usize {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Quantizes a channel-major `[3, h, w]` array with values in `[0, 1]`.
    pub fn from_chw(width: u32, height: u32, chw: &[f32]) -> Self {
        let plane = (width * height) as usize;
        assert_eq!(chw.len(), plane * 3, "from_chw: wrong length");
        let mut data = vec![0u8; plane * 3];
        for c in 0..3 {
            for i in 0..plane {
                let v = chw[c * plane + i];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                data[i * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Self { width, height, data }
    }

    /// Channel-major `[3, h, w]` floats in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = (self.width * self.height) as usize;
        let mut out = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                out[c * plane + i] = self.data[i * 3 + c] as f32 / 255.0;
            }
        }
        out
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    /// Hex sha256 of dimensions and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width, self.height, self.data.clone())
            .ok_or_else(|| Error::invalid("image buffer does not match dimensions"))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w,
            height: h,
            data: img.into_raw(),
        })
    }

    pub fn resized(&self, width: u32, height: u32) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let img = RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("valid buffer");
        let out = image::imageops::resize(&img, width, height, image::imageops::FilterType::Triangle);
        Self {
            width,
            height,
            data: out.into_raw(),
        }
    }
}
