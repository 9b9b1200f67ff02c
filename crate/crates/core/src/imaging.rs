//! RGB(A) float images with PNG and raw-f32 I/O.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage, RgbaImage};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 8] = b"H360RAW\0";

/// Row-major RGB image with values in [0, 1] and an optional alpha plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f32>,
    alpha: Option<Vec<f32>>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let n = (width * height) as usize;
        let px = rgb.map(|v| v.clamp(0.0, 1.0) as f32);
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&px);
        }
        Self {
            width,
            height,
            data,
            alpha: None,
        }
    }

    pub fn from_rgb(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width * height * 3) as usize {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            alpha: None,
        })
    }

    pub fn with_alpha(mut self, alpha: Vec<f32>) -> Result<Self> {
        if alpha.len() != self.pixel_count() {
            return Err(Error::Dimension("alpha plane size".into()));
        }
        self.alpha = Some(alpha.into_iter().map(|v| v.clamp(0.0, 1.0)).collect());
        Ok(self)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn alpha(&self) -> Option<&[f32]> {
        self.alpha.as_deref()
    }

    pub fn rgb(&self, idx: usize) -> [f32; 3] {
        [self.data[idx * 3], self.data[idx * 3 + 1], self.data[idx * 3 + 2]]
    }

    pub fn rgb_f64(&self, idx: usize) -> [f64; 3] {
        self.rgb(idx).map(f64::from)
    }

    pub fn at(&self, x: u32, y: u32) -> [f32; 3] {
        self.rgb((y * self.width + x) as usize)
    }

    pub fn set_rgb(&mut self, idx: usize, rgb: [f64; 3]) {
        for ch in 0..3 {
            self.data[idx * 3 + ch] = rgb[ch].clamp(0.0, 1.0) as f32;
        }
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Encode as 8-bit sRGB-as-is PNG (RGBA when an alpha plane is present).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = Cursor::new(Vec::new());
        match &self.alpha {
            None => {
                let buf = RgbImage::from_raw(self.width, self.height, self.data.iter().map(|&v| q(v)).collect())
                    .expect("buffer size");
                buf.write_to(&mut out, ImageFormat::Png)?;
            }
            Some(alpha) => {
                let mut raw = Vec::with_capacity(self.pixel_count() * 4);
                for i in 0..self.pixel_count() {
                    raw.extend_from_slice(&[q(self.data[3 * i]), q(self.data[3 * i + 1]), q(self.data[3 * i + 2]), q(alpha[i])]);
                }
                let buf = RgbaImage::from_raw(self.width, self.height, raw).expect("buffer size");
                buf.write_to(&mut out, ImageFormat::Png)?;
            }
        }
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let dynimg = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        let has_alpha = dynimg.color().has_alpha();
        let rgba = dynimg.to_rgba8();
        let (w, h) = rgba.dimensions();
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        let mut alpha = Vec::with_capacity((w * h) as usize);
        for px in rgba.pixels() {
            data.extend(px.0[..3].iter().map(|&v| v as f32 / 255.0));
            alpha.push(px.0[3] as f32 / 255.0);
        }
        let img = Self::from_rgb(w, h, data)?;
        if has_alpha {
            img.with_alpha(alpha)
        } else {
            Ok(img)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png_bytes(&binio::read_file(path)?)
    }

    /// Raw dump: magic, u32 width, height, channel count (3 or 4), then f32 values (interleaved).
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(RAW_MAGIC);
        w.u32(self.width);
        w.u32(self.height);
        match &self.alpha {
            None => {
                w.u32(3);
                w.f32s(&self.data);
            }
            Some(a) => {
                w.u32(4);
                for i in 0..self.pixel_count() {
                    w.f32s(&[self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2], a[i]]);
                }
            }
        }
        w.buf
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(RAW_MAGIC)?;
        let (w, h, c) = (r.u32()?, r.u32()?, r.u32()?);
        let n = (w as usize) * (h as usize);
        let vals = r.f32s(n * c as usize)?;
        r.finish()?;
        match c {
            3 => Self::from_rgb(w, h, vals),
            4 => {
                let mut rgb = Vec::with_capacity(n * 3);
                let mut a = Vec::with_capacity(n);
                for px in vals.chunks_exact(4) {
                    rgb.extend_from_slice(&px[..3]);
                    a.push(px[3]);
                }
                Self::from_rgb(w, h, rgb)?.with_alpha(a)
            }
            _ => Err(Error::Format(format!("unsupported channel count {c}"))),
        }
    }
}

/// Binary mask helpers: masks are stored as single-channel 0/255 PNGs.
pub fn mask_to_png_bytes(width: u32, height: u32, mask: &[bool]) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(width, height, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
        .ok_or_else(|| Error::Dimension("mask size".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn mask_from_png_bytes(bytes: &[u8]) -> Result<(u32, u32, Vec<bool>)> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.pixels().map(|p| p.0[0] >= 128).collect()))
}
