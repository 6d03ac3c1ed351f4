//! Floating-point image buffers tagged with their color space, plus PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpretation of the samples stored in an [`ImageBuf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    /// Display-encoded gray, one channel in [0, 1].
    Gray,
    /// Linear-light RGB, three channels, unbounded above.
    LinearRgb,
    /// Gamma-encoded sRGB, three channels in [0, 1].
    Srgb,
    /// CIE L*a*b* (D65), three channels.
    Lab,
    /// A single data plane without photometric meaning (depth, opacity, a chroma channel).
    Scalar,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray | ColorSpace::Scalar => 1,
            ColorSpace::LinearRgb | ColorSpace::Srgb | ColorSpace::Lab => 3,
        }
    }
}

/// Row-major `height × width × channels` image of `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, space: ColorSpace) -> Self {
        Self::filled(width, height, space, 0.0)
    }

    pub fn filled(width: usize, height: usize, space: ColorSpace, value: f32) -> Self {
        Self {
            width,
            height,
            space,
            data: vec![value; width * height * space.channels()],
        }
    }

    pub fn from_vec(width: usize, height: usize, space: ColorSpace, data: Vec<f32>) -> Result<Self> {
        let expected = width * height * space.channels();
        if data.len() != expected {
            return Err(Error::dims(
                format!("{expected} samples for {width}x{height} {space:?}"),
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            space,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let c = space.channels();
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y)[..c]);
            }
        }
        Self {
            width,
            height,
            space,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let c = self.channels();
        let i = (y * self.width + x) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let c = self.channels();
        let i = (y * self.width + x) * c;
        &mut self.data[i..i + c]
    }

    /// Pixel by linear (row-major) index.
    pub fn at(&self, index: usize) -> &[f32] {
        let c = self.channels();
        &self.data[index * c..index * c + c]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels())
    }

    /// Extracts channel `c` as a [`ColorSpace::Scalar`] plane.
    pub fn plane(&self, c: usize) -> ImageBuf {
        assert!(c < self.channels(), "channel {c} out of range");
        let data = self.pixels().map(|p| p[c]).collect();
        ImageBuf {
            width: self.width,
            height: self.height,
            space: ColorSpace::Scalar,
            data,
        }
    }

    /// Relabels the buffer without touching samples. Channel counts must agree.
    pub fn retag(mut self, space: ColorSpace) -> Result<ImageBuf> {
        if space.channels() != self.channels() {
            return Err(Error::dims(
                format!("{} channels", space.channels()),
                format!("{} channels", self.channels()),
            ));
        }
        self.space = space;
        Ok(self)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn ensure_same_shape(&self, other: &ImageBuf) -> Result<()> {
        if self.dims() != other.dims() || self.channels() != other.channels() {
            return Err(Error::dims(
                format!("{}x{}x{}", self.width, self.height, self.channels()),
                format!("{}x{}x{}", other.width, other.height, other.channels()),
            ));
        }
        Ok(())
    }
}

/// Bit depth of a decoded PNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// A decoded PNG before any color-space interpretation. Samples are scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct DecodedPng {
    pub image: ImageBuf,
    pub depth: BitDepth,
}

/// Reads a PNG as gray (1 channel, tagged `Gray`) or color (3 channels, tagged `Srgb`).
/// Alpha is dropped.
pub fn read_png(path: &Path) -> Result<DecodedPng> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let decoded = match img {
        DynamicImage::ImageLuma8(buf) => DecodedPng {
            image: ImageBuf::from_vec(
                w,
                h,
                ColorSpace::Gray,
                buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            )?,
            depth: BitDepth::Eight,
        },
        DynamicImage::ImageLuma16(buf) => DecodedPng {
            image: ImageBuf::from_vec(
                w,
                h,
                ColorSpace::Gray,
                buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            )?,
            depth: BitDepth::Sixteen,
        },
        DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_luma8();
            DecodedPng {
                image: ImageBuf::from_vec(
                    w,
                    h,
                    ColorSpace::Gray,
                    buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
                )?,
                depth: BitDepth::Eight,
            }
        }
        DynamicImage::ImageLumaA16(_) => {
            let buf = img.to_luma16();
            DecodedPng {
                image: ImageBuf::from_vec(
                    w,
                    h,
                    ColorSpace::Gray,
                    buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
                )?,
                depth: BitDepth::Sixteen,
            }
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let buf = img.to_rgb16();
            DecodedPng {
                image: ImageBuf::from_vec(
                    w,
                    h,
                    ColorSpace::Srgb,
                    buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
                )?,
                depth: BitDepth::Sixteen,
            }
        }
        other => {
            let buf = other.to_rgb8();
            DecodedPng {
                image: ImageBuf::from_vec(
                    w,
                    h,
                    ColorSpace::Srgb,
                    buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
                )?,
                depth: BitDepth::Eight,
            }
        }
    };
    Ok(decoded)
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel image as a 16-bit gray PNG or a 3-channel image as 16-bit RGB.
/// Values are clamped to [0, 1].
pub fn write_png16(img: &ImageBuf, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let samples: Vec<u16> = img.data().iter().map(|&v| quantize16(v)).collect();
    let result = if img.channels() == 1 {
        ImageBuffer::<Luma<u16>, _>::from_raw(w, h, samples)
            .expect("sample count matches dims")
            .save(path)
    } else {
        ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, samples)
            .expect("sample count matches dims")
            .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit variant of [`write_png16`], used for viewable outputs.
pub fn write_png8(img: &ImageBuf, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let samples: Vec<u8> = img.data().iter().map(|&v| quantize8(v)).collect();
    let result = if img.channels() == 1 {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, samples)
            .expect("sample count matches dims")
            .save(path)
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, samples)
            .expect("sample count matches dims")
            .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
