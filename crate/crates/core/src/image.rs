//! Dense image buffers and their on-disk encodings.
//!
//! All images are row-major with interleaved channels and `f64` samples.
//! Encodings:
//! - color: 8-bit RGB PNG
//! - depth: 16-bit grayscale PNG with a configurable scale (units per meter)
//! - labels: 8-bit grayscale PNG holding class indices, `255` = ignore
//! - feature maps: raw little-endian `f32`, planar, behind a 16-byte header
//!   `b"GSFF"`, `u32` height, `u32` width, `u32` channels

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Label value excluded from losses and scores.
pub const IGNORE_LABEL: u8 = 255;

const PLANAR_MAGIC: &[u8; 4] = b"GSFF";
const PLANAR_HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dim(format!(
                "image buffer of {} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, width: usize, height: usize, channels: usize, what: &str) -> Result<()> {
        if self.width != width || self.height != height || self.channels != channels {
            return Err(Error::dim(format!(
                "{what}: expected {width}x{height}x{channels}, got {}x{}x{}",
                self.width, self.height, self.channels
            )));
        }
        Ok(())
    }

    /// Luma with Rec. 601 weights; identity for single-channel images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Image::zeros(self.width, self.height, 1);
        for i in 0..self.num_pixels() {
            let p = self.pixel(i);
            out.data[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
        out
    }
}

/// Per-pixel integer class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Quantize `[0,1]` RGB to 8 bits (round to nearest, clamped).
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(img: &Image, path: &Path) -> Result<()> {
    img.check_shape(img.width, img.height, 3, "color png")?;
    let buf: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    ::image::save_buffer(
        path,
        &buf,
        img.width as u32,
        img.height as u32,
        ::image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| image_err(path, e))
}

/// Reads any 8-bit color image (PNG or JPEG) into `[0,1]` RGB.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = ::image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

/// Writes depth in meters as 16-bit PNG, `value = round(depth * scale)`.
pub fn write_depth_png(depth: &Image, path: &Path, scale: f64) -> Result<()> {
    depth.check_shape(depth.width, depth.height, 1, "depth png")?;
    let buf: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| (d.max(0.0) * scale).round().min(u16::MAX as f64) as u16)
        .collect();
    let img: ::image::ImageBuffer<::image::Luma<u16>, Vec<u16>> =
        ::image::ImageBuffer::from_raw(depth.width as u32, depth.height as u32, buf)
            .ok_or_else(|| image_err(path, "depth buffer size"))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a 16-bit depth PNG, dividing raw values by `scale` to get meters.
pub fn read_depth_png(path: &Path, scale: f64) -> Result<Image> {
    let img = ::image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / scale).collect();
    Image::from_vec(w as usize, h as usize, 1, data)
}

pub fn write_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    ::image::save_buffer(
        path,
        &labels.data,
        labels.width as u32,
        labels.height as u32,
        ::image::ExtendedColorType::L8,
    )
    .map_err(|e| image_err(path, e))
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = ::image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(LabelMap {
        width: w as usize,
        height: h as usize,
        data: img.into_raw(),
    })
}

/// Encodes a multi-channel image in the planar float format.
pub fn encode_planar(img: &Image) -> Vec<u8> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = Vec::with_capacity(PLANAR_HEADER_LEN + 4 * w * h * c);
    out.extend_from_slice(PLANAR_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for ch in 0..c {
        for p in 0..w * h {
            out.extend_from_slice(&(img.data[p * c + ch] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_planar(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < PLANAR_HEADER_LEN {
        return Err(Error::Format(format!(
            "planar feature file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != PLANAR_MAGIC {
        return Err(Error::Format("planar feature file: bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(4), word(8), word(12));
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(PLANAR_HEADER_LEN))
        .ok_or_else(|| Error::Format("planar feature file: dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "planar feature file: header declares {h}x{w}x{c} ({expected} bytes), found {} bytes",
            bytes.len()
        )));
    }
    let mut data = vec![0.0; w * h * c];
    let body = &bytes[PLANAR_HEADER_LEN..];
    for ch in 0..c {
        for p in 0..w * h {
            let off = 4 * (ch * w * h + p);
            data[p * c + ch] = f32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as f64;
        }
    }
    Image::from_vec(w, h, c, data)
}

pub fn write_planar(img: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_planar(img)).map_err(|e| Error::io(path, e))
}

pub fn read_planar(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_planar(&bytes)
}
