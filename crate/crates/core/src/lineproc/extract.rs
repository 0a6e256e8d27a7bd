use serde::{Deserialize, Serialize};

use super::raster::{percentile_sorted, sorted_copy};
use super::{LineError, RasterImage};
use crate::corpus::Point;

/// Fraction of the baseline spacing kept above the baseline.
pub const ABOVE_FRACTION: f64 = 0.73;
/// Fraction of the baseline spacing kept below the baseline.
pub const BELOW_FRACTION: f64 = 0.23;
/// Spacing used when a page has fewer than two baselines (capped by the
/// image height).
pub const FALLBACK_SPACING: f64 = 120.0;
/// Guard for the percentile spread of near-constant crops.
pub const NORMALIZE_EPS: f64 = 1e-6;

/// Median vertical distance between consecutive baselines, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpacing(f64);

impl BaselineSpacing {
    pub fn new(h: f64) -> Result<Self, LineError> {
        if h.is_finite() && h > 0.0 {
            Ok(BaselineSpacing(h))
        } else {
            Err(LineError::BadSpacing(h))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Rows kept above the baseline.
    pub fn rows_above(self) -> usize {
        (ABOVE_FRACTION * self.0).round() as usize
    }

    /// Rows kept below the baseline.
    pub fn rows_below(self) -> usize {
        (BELOW_FRACTION * self.0).round() as usize
    }

    /// Height of every line image cut with this spacing.
    pub fn line_height(self) -> usize {
        self.rows_above() + self.rows_below() + 1
    }
}

/// Baseline ordinate at column `x`: linear between vertices, constant past
/// the ends. `baseline` must have strictly increasing x.
pub fn baseline_y(baseline: &[Point], x: f64) -> f64 {
    let first = baseline[0];
    let last = baseline[baseline.len() - 1];
    if x <= first.x as f64 {
        return first.y as f64;
    }
    if x >= last.x as f64 {
        return last.y as f64;
    }
    for w in baseline.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x <= b.x as f64 {
            let t = (x - a.x as f64) / (b.x - a.x) as f64;
            return a.y as f64 + t * (b.y - a.y) as f64;
        }
    }
    last.y as f64
}

/// Height of a baseline averaged over its x-extent.
pub fn baseline_mean_y(baseline: &[Point]) -> f64 {
    let extent = (baseline[baseline.len() - 1].x - baseline[0].x) as f64;
    if baseline.len() < 2 || extent <= 0.0 {
        return baseline.iter().map(|p| p.y as f64).sum::<f64>() / baseline.len() as f64;
    }
    let area: f64 = baseline
        .windows(2)
        .map(|w| (w[1].x - w[0].x) as f64 * (w[0].y + w[1].y) as f64 / 2.0)
        .sum();
    area / extent
}

/// Median gap between successive baselines sorted by mean height.
///
/// With a single baseline the spacing is `min(image_height, 120)`.
pub fn median_baseline_spacing<B: AsRef<[Point]>>(
    baselines: &[B],
    image_height: usize,
) -> Result<BaselineSpacing, LineError> {
    if baselines.is_empty() {
        return Err(LineError::NoBaselines);
    }
    if baselines.iter().any(|b| b.as_ref().is_empty()) {
        return Err(LineError::DegenerateBaseline);
    }
    let mut ys: Vec<f64> = baselines.iter().map(|b| baseline_mean_y(b.as_ref())).collect();
    if ys.len() < 2 {
        return BaselineSpacing::new(FALLBACK_SPACING.min(image_height as f64));
    }
    ys.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = ys.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    let median = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        (gaps[n / 2 - 1] + gaps[n / 2]) / 2.0
    };
    if median > 0.0 {
        BaselineSpacing::new(median)
    } else {
        // all baselines at the same height
        BaselineSpacing::new(FALLBACK_SPACING.min(image_height as f64))
    }
}

/// A rectified line cut from a page, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LineCrop {
    pub image: RasterImage,
    pub baseline_row: usize,
}

/// Cuts the band `[-0.73H, +0.23H]` around a baseline and shifts every column
/// so the baseline lands on row `round(0.73H)`.
///
/// Samples falling outside the page take the per-channel median of the
/// in-page samples of the crop.
pub fn extract_line(
    image: &RasterImage,
    baseline: &[Point],
    spacing: BaselineSpacing,
) -> Result<LineCrop, LineError> {
    if baseline.len() < 2 || baseline.windows(2).any(|w| w[1].x <= w[0].x) {
        return Err(LineError::DegenerateBaseline);
    }
    let x0 = baseline[0].x;
    let x1 = baseline[baseline.len() - 1].x;
    let out_w = (x1 - x0) as usize + 1;
    let above = spacing.rows_above();
    let out_h = spacing.line_height();
    let ch = image.channels();
    let (w, h) = (image.width() as i64, image.height() as i64);

    let mut pixels = vec![0f32; out_w * out_h * ch];
    let mut valid = vec![false; out_w * out_h];
    for ox in 0..out_w {
        let sx = x0 as i64 + ox as i64;
        if sx < 0 || sx >= w {
            continue;
        }
        let yb = baseline_y(baseline, sx as f64);
        for oy in 0..out_h {
            let sy = yb + oy as f64 - above as f64;
            let fy = sy.floor();
            let t = sy - fy;
            let y0 = fy as i64;
            let o = oy * out_w + ox;
            if t == 0.0 {
                if y0 < 0 || y0 >= h {
                    continue;
                }
                for c in 0..ch {
                    pixels[o * ch + c] = image.get(sx as usize, y0 as usize, c);
                }
            } else {
                if y0 < 0 || y0 + 1 >= h {
                    continue;
                }
                let t = t as f32;
                for c in 0..ch {
                    let a = image.get(sx as usize, y0 as usize, c);
                    let b = image.get(sx as usize, y0 as usize + 1, c);
                    pixels[o * ch + c] = a + t * (b - a);
                }
            }
            valid[o] = true;
        }
    }

    if valid.iter().any(|v| !v) {
        let mut fill = vec![0f32; ch];
        for (c, f) in fill.iter_mut().enumerate() {
            let samples: Vec<f32> = valid
                .iter()
                .enumerate()
                .filter(|(_, &v)| v)
                .map(|(o, _)| pixels[o * ch + c])
                .collect();
            *f = if samples.is_empty() {
                let all: Vec<f32> = image.pixels().iter().skip(c).step_by(ch).copied().collect();
                percentile_sorted(&sorted_copy(&all), 0.5)
            } else {
                percentile_sorted(&sorted_copy(&samples), 0.5)
            };
        }
        for (o, _) in valid.iter().enumerate().filter(|(_, &v)| !v) {
            pixels[o * ch..o * ch + ch].copy_from_slice(&fill);
        }
    }

    Ok(LineCrop {
        image: RasterImage::new(out_w, out_h, ch, pixels)?,
        baseline_row: above,
    })
}

/// Grayscale, background-subtracted, inverted line raster: ink is positive,
/// paper is near zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLine {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub baseline_row: usize,
}

impl NormalizedLine {
    pub fn to_raster(&self) -> RasterImage {
        RasterImage::from_gray(self.width, self.height, self.pixels.clone())
            .expect("normalized line dimensions are valid")
    }
}

/// `-(px - median) / max(p90 - p10, ε)` over the grayscale crop.
pub fn normalize_line(crop: &RasterImage, baseline_row: usize) -> NormalizedLine {
    let gray = crop.to_gray();
    let sorted = sorted_copy(gray.pixels());
    let median = percentile_sorted(&sorted, 0.5) as f64;
    let spread = (percentile_sorted(&sorted, 0.9) as f64 - percentile_sorted(&sorted, 0.1) as f64)
        .max(NORMALIZE_EPS);
    let pixels = gray
        .pixels()
        .iter()
        .map(|&v| (-(v as f64 - median) / spread) as f32)
        .collect();
    NormalizedLine {
        width: gray.width(),
        height: gray.height(),
        pixels,
        baseline_row,
    }
}

/// Bilinear resize to a fixed height, keeping the aspect ratio.
pub fn resize_to_height(line: &NormalizedLine, height: usize) -> NormalizedLine {
    if line.height == height {
        return line.clone();
    }
    let scale = height as f64 / line.height as f64;
    let width = ((line.width as f64 * scale).round() as usize).max(1);
    let sx = line.width as f64 / width as f64;
    let sy = line.height as f64 / height as f64;
    let src = |x: usize, y: usize| line.pixels[y * line.width + x];
    let mut pixels = Vec::with_capacity(width * height);
    for oy in 0..height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (line.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(line.height - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (line.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(line.width - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src(x0, y0) + tx * (src(x1, y0) - src(x0, y0));
            let bot = src(x0, y1) + tx * (src(x1, y1) - src(x0, y1));
            pixels.push(top + ty * (bot - top));
        }
    }
    NormalizedLine {
        width,
        height,
        pixels,
        baseline_row: ((line.baseline_row as f64 + 0.5) * scale - 0.5).round().max(0.0) as usize,
    }
}
