//! Normalized RGB images, bilinear resampling and PNG I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const DEFAULT_HEIGHT: usize = 256;
pub const DEFAULT_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResolutionTag {
    HR,
    LR2,
    LR3,
    LR4,
    Unknown,
}

impl ResolutionTag {
    /// Tag for an image down-sampled at `rate` (1 meaning untouched).
    pub fn from_rate(rate: u32) -> Result<Self> {
        match rate {
            1 => Ok(Self::HR),
            2 => Ok(Self::LR2),
            3 => Ok(Self::LR3),
            4 => Ok(Self::LR4),
            r => Err(Error::Argument(format!("down-sampling rate must be in 1..=4, got {r}"))),
        }
    }

    pub fn rate(self) -> Option<u32> {
        match self {
            Self::HR => Some(1),
            Self::LR2 => Some(2),
            Self::LR3 => Some(3),
            Self::LR4 => Some(4),
            Self::Unknown => None,
        }
    }

    pub fn is_low_resolution(self) -> bool {
        matches!(self, Self::LR2 | Self::LR3 | Self::LR4)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HR => "HR",
            Self::LR2 => "LR2",
            Self::LR3 => "LR3",
            Self::LR4 => "LR4",
            Self::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for ResolutionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResolutionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "HR" => Self::HR,
            "LR2" => Self::LR2,
            "LR3" => Self::LR3,
            "LR4" => Self::LR4,
            "UNKNOWN" => Self::Unknown,
            other => return Err(Error::Argument(format!("unknown resolution tag {other:?}"))),
        })
    }
}

/// A `3 × H × W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
    tag: ResolutionTag,
}

impl ImageTensor {
    pub fn new(data: Tensor, tag: ResolutionTag) -> Result<Self> {
        if data.ndim() != 3 || data.dim(0) != CHANNELS || data.dim(1) == 0 || data.dim(2) == 0 {
            return Err(Error::Argument(format!(
                "image tensor must be 3 x H x W, got {:?}",
                data.shape()
            )));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { data, tag })
    }

    /// Builds an image from interleaved RGB(A) bytes as delivered by a
    /// decoder or an HTML canvas.
    pub fn from_interleaved_u8(bytes: &[u8], height: usize, width: usize, stride: usize) -> Result<Self> {
        if stride < CHANNELS || bytes.len() != height * width * stride {
            return Err(Error::Argument(format!(
                "{} bytes do not form a {height}x{width} image with {stride} bytes per pixel",
                bytes.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; CHANNELS * plane];
        for (i, px) in bytes.chunks(stride).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Self::new(Tensor::new(vec![CHANNELS, height, width], data)?, ResolutionTag::Unknown)
    }

    pub fn constant(height: usize, width: usize, value: f64, tag: ResolutionTag) -> Result<Self> {
        Self::new(Tensor::full(&[CHANNELS, height, width], value), tag)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn tag(&self) -> ResolutionTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: ResolutionTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Interleaved 8-bit RGBA, opaque.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let plane = self.height() * self.width();
        let d = self.data.data();
        let mut out = Vec::with_capacity(plane * 4);
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push(to_u8(d[c * plane + i]));
            }
            out.push(255);
        }
        out
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Source coordinate and interpolation fraction for one output index under
/// half-pixel-centre alignment.
fn source_index(out: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == out_len {
        return (out, out, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let s = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!("cannot resize to {height}x{width}")));
    }
    let (ih, iw) = (img.height(), img.width());
    if (ih, iw) == (height, width) {
        return Ok(img.clone());
    }
    let cols: Vec<_> = (0..width).map(|x| source_index(x, iw, width)).collect();
    let src = img.data.data();
    let mut out = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        let plane = &src[c * ih * iw..(c + 1) * ih * iw];
        for y in 0..height {
            let (y0, y1, fy) = source_index(y, ih, height);
            let (r0, r1) = (&plane[y0 * iw..(y0 + 1) * iw], &plane[y1 * iw..(y1 + 1) * iw]);
            for &(x0, x1, fx) in &cols {
                let top = lerp(r0[x0], r0[x1], fx);
                let bottom = lerp(r1[x0], r1[x1], fx);
                out.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![CHANNELS, height, width], out)?, img.tag)
}

/// Spatial size of the intermediate image when down-sampling by `rate`.
pub fn intermediate_size(height: usize, width: usize, rate: u32) -> (usize, usize) {
    let r = rate as usize;
    ((height / r).max(1), (width / r).max(1))
}

/// Down-samples by `rate` (flooring the intermediate size) and resizes back
/// to the original size. Rate 1 returns the input unchanged.
pub fn downsample_resize(img: &ImageTensor, rate: u32) -> Result<ImageTensor> {
    let tag = ResolutionTag::from_rate(rate)?;
    if rate == 1 {
        return Ok(img.clone());
    }
    let (h, w) = intermediate_size(img.height(), img.width(), rate);
    let small = resize_bilinear(img, h, w)?;
    Ok(resize_bilinear(&small, img.height(), img.width())?.with_tag(tag))
}

fn from_dynamic(img: DynamicImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; CHANNELS * plane];
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    if sixteen {
        for (i, px) in img.to_rgb16().pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = px[c] as f64 / u16::MAX as f64;
            }
        }
    } else {
        for (i, px) in img.to_rgb8().pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = px[c] as f64 / u8::MAX as f64;
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![CHANNELS, h, w], data)?, ResolutionTag::Unknown)
}

/// Decodes an image file at its native size.
pub fn load_native(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::ingest(path, e))?;
    from_dynamic(img)
}

/// Decodes an image file and resizes it to `height × width`.
pub fn load_resized(path: &Path, height: usize, width: usize, tag: ResolutionTag) -> Result<ImageTensor> {
    Ok(resize_bilinear(&load_native(path)?, height, width)?.with_tag(tag))
}

pub fn decode_png_bytes(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::ingest("<memory>", e))?;
    from_dynamic(img)
}

/// Writes an 8-bit lossless PNG.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let d = img.data.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::ingest(path, e))
}

/// Places images left to right on one canvas (heights must agree).
pub fn hconcat(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let h = images.first().map(|i| i.height()).unwrap_or(0);
    if images.is_empty() || images.iter().any(|i| i.height() != h) {
        return Err(Error::Argument("hconcat needs images of equal height".into()));
    }
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut out = vec![0.0; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            let mut x0 = 0;
            for img in images {
                let iw = img.width();
                let src = &img.data.data()[(c * h + y) * iw..(c * h + y + 1) * iw];
                out[(c * h + y) * w + x0..(c * h + y) * w + x0 + iw].copy_from_slice(src);
                x0 += iw;
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![CHANNELS, h, w], out)?, ResolutionTag::Unknown)
}
