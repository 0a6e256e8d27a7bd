use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use super::LineError;

/// Luminance weights used for every RGB → gray conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Row-major float image with 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self, LineError> {
        if width == 0 || height == 0 {
            return Err(LineError::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(LineError::Channels(channels));
        }
        if pixels.len() != width * height * channels {
            return Err(LineError::PixelCount {
                expected: width * height * channels,
                got: pixels.len(),
            });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(LineError::NonFinite);
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        RasterImage::new(width, height, channels, vec![value; width * height * channels])
            .expect("filled image with positive dimensions")
    }

    pub fn from_gray(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, LineError> {
        RasterImage::new(width, height, 1, pixels)
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

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Single-channel copy; RGB is combined with [`LUMA`].
    pub fn to_gray(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Copy of the rectangle `[x, x+w) × [y, y+h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RasterImage, LineError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(LineError::CropOutOfBounds);
        }
        let mut pixels = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + w * self.channels]);
        }
        RasterImage::new(w, h, self.channels, pixels)
    }

    /// Three-channel copy; gray values are replicated.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Bilinear (triangle filter) resample to the given size.
    pub fn resize(&self, width: usize, height: usize) -> Result<RasterImage, LineError> {
        if width == 0 || height == 0 {
            return Err(LineError::EmptyImage);
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let (w, h) = (width as u32, height as u32);
        let filter = image::imageops::FilterType::Triangle;
        let pixels = if self.channels == 1 {
            let src = image::ImageBuffer::<Luma<f32>, _>::from_raw(
                self.width as u32,
                self.height as u32,
                self.pixels.clone(),
            )
            .expect("buffer size matches dimensions");
            image::imageops::resize(&src, w, h, filter).into_raw()
        } else {
            let src = image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("buffer size matches dimensions");
            image::imageops::resize(&src, w, h, filter).into_raw()
        };
        RasterImage::new(width, height, self.channels, pixels)
    }

    pub fn from_dynamic(img: &DynamicImage) -> RasterImage {
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb32f();
            RasterImage {
                width,
                height,
                channels: 3,
                pixels: rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            }
        } else {
            let gray = img.to_luma32f();
            RasterImage {
                width,
                height,
                channels: 1,
                pixels: gray.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<RasterImage, LineError> {
        let img = image::load_from_memory(bytes).map_err(|e| LineError::Image(e.to_string()))?;
        Ok(RasterImage::from_dynamic(&img))
    }

    pub fn open(path: &Path) -> Result<RasterImage, LineError> {
        let img = image::open(path).map_err(|e| LineError::Image(format!("{}: {e}", path.display())))?;
        Ok(RasterImage::from_dynamic(&img))
    }

    /// Encodes as an 8-bit PNG. Values are clamped to [0,1], or linearly
    /// stretched from [min,max] when `rescale` is set.
    pub fn to_png(&self, rescale: bool) -> Vec<u8> {
        let (lo, hi) = if rescale {
            let lo = self.pixels.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = self.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (lo, hi)
        } else {
            (0.0, 1.0)
        };
        let span = if hi > lo { hi - lo } else { 1.0 };
        let to_u8 = |v: f32| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = Cursor::new(Vec::new());
        let result = if self.channels == 1 {
            let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([to_u8(self.get(x as usize, y as usize, 0))])
            });
            img.write_to(&mut out, ImageFormat::Png)
        } else {
            let raw: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
            let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer size matches dimensions");
            img.write_to(&mut out, ImageFormat::Png)
        };
        result.expect("PNG encoding into memory");
        out.into_inner()
    }
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(q·n)` (1-based), clamped to the slice.
pub fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub(crate) fn sorted_copy(values: &[f32]) -> Vec<f32> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}
