//! Training-time augmentation of line crops: colour jitter, a small affine
//! warp, then either nothing, sharpening or a Gaussian blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{percentile_sorted, sorted_copy, LUMA};
use super::RasterImage;

/// Last step of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Finish {
    Identity,
    Sharpen,
    Blur { sigma: f64 },
}

/// Every random draw of one augmentation, so it can be replayed or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation as a fraction of the colour wheel.
    pub hue: f64,
    pub rotation_deg: f64,
    /// Horizontal shift as a fraction of the width.
    pub translate_x: f64,
    /// Vertical shift as a fraction of the height.
    pub translate_y: f64,
    pub scale: f64,
    pub finish: Finish,
}

impl AugmentParams {
    /// The draw at every distribution midpoint; leaves the crop untouched.
    pub fn identity() -> Self {
        AugmentParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            rotation_deg: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            scale: 1.0,
            finish: Finish::Identity,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            brightness: rng.random_range(0.5..=1.5),
            contrast: rng.random_range(0.5..=1.5),
            saturation: rng.random_range(0.5..=1.5),
            hue: rng.random_range(-0.5..=0.5),
            rotation_deg: rng.random_range(-0.7..=0.7),
            translate_x: rng.random_range(-0.01..=0.01),
            translate_y: rng.random_range(-0.02..=0.02),
            scale: rng.random_range(0.98..=1.02),
            finish: sample_finish(rng),
        }
    }

    fn affine_is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.translate_x == 0.0
            && self.translate_y == 0.0
            && self.scale == 1.0
    }
}

/// Identity with probability 1/4, sharpen ×2 with 1/4, blur σ∈U[1,6] with 1/2.
pub fn sample_finish<R: Rng + ?Sized>(rng: &mut R) -> Finish {
    let u: f64 = rng.random();
    if u < 0.25 {
        Finish::Identity
    } else if u < 0.5 {
        Finish::Sharpen
    } else {
        Finish::Blur {
            sigma: rng.random_range(1.0..=6.0),
        }
    }
}

/// Augments a pre-normalization crop. Same seed, same output.
pub fn augment_line(crop: &RasterImage, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augmentation(crop, &AugmentParams::sample(&mut rng))
}

pub fn apply_augmentation(crop: &RasterImage, p: &AugmentParams) -> RasterImage {
    let mut img = crop.clone();
    if p.brightness != 1.0 {
        for v in img.pixels_mut() {
            *v = (*v * p.brightness as f32).clamp(0.0, 1.0);
        }
    }
    if p.contrast != 1.0 {
        let gray = img.to_gray();
        let mean = gray.pixels().iter().map(|&v| v as f64).sum::<f64>() / gray.pixels().len() as f64;
        let (m, c) = (mean as f32, p.contrast as f32);
        for v in img.pixels_mut() {
            *v = ((*v - m) * c + m).clamp(0.0, 1.0);
        }
    }
    if img.channels() == 3 {
        if p.saturation != 1.0 {
            let s = p.saturation as f32;
            for px in img.pixels_mut().chunks_exact_mut(3) {
                let g = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                for v in px.iter_mut() {
                    *v = (g + (*v - g) * s).clamp(0.0, 1.0);
                }
            }
        }
        if p.hue != 0.0 {
            for px in img.pixels_mut().chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let h = (h + p.hue as f32).rem_euclid(1.0);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                px.copy_from_slice(&[r, g, b]);
            }
        }
    }
    if !p.affine_is_identity() {
        img = affine(&img, p);
    }
    match p.finish {
        Finish::Identity => img,
        Finish::Sharpen => sharpen(&img, 2.0),
        Finish::Blur { sigma } => gaussian_blur(&img, sigma),
    }
}

fn channel_medians(img: &RasterImage) -> Vec<f32> {
    let ch = img.channels();
    (0..ch)
        .map(|c| {
            let v: Vec<f32> = img.pixels().iter().skip(c).step_by(ch).copied().collect();
            percentile_sorted(&sorted_copy(&v), 0.5)
        })
        .collect()
}

/// Rotation, scale and translation about the image centre, bilinear, with
/// uncovered pixels set to the channel median.
fn affine(img: &RasterImage, p: &AugmentParams) -> RasterImage {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let fill = channel_medians(img);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let tx = p.translate_x * w as f64;
    let ty = p.translate_y * h as f64;
    let theta = p.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = RasterImage::filled(w, h, ch, 0.0);
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: undo translation, rotation, then scale
            let dx = ox as f64 - cx - tx;
            let dy = oy as f64 - cy - ty;
            let sx = (cos * dx + sin * dy) / p.scale + cx;
            let sy = (-sin * dx + cos * dy) / p.scale + cy;
            for c in 0..ch {
                let v = bilinear(img, sx, sy, c).unwrap_or(fill[c]);
                out.set(ox, oy, c, v);
            }
        }
    }
    out
}

fn bilinear(img: &RasterImage, x: f64, y: f64, c: usize) -> Option<f32> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let tx = (x - x0 as f64) as f32;
    let ty = (y - y0 as f64) as f32;
    let top = img.get(x0, y0, c) + tx * (img.get(x1, y0, c) - img.get(x0, y0, c));
    let bot = img.get(x0, y1, c) + tx * (img.get(x1, y1, c) - img.get(x0, y1, c));
    Some(top + ty * (bot - top))
}

/// Blend with a 3×3 smoothed copy: `factor·img + (1-factor)·smooth`. Border
/// pixels keep their value.
fn sharpen(img: &RasterImage, factor: f32) -> RasterImage {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..ch {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        acc += wgt * img.get(x + dx - 1, y + dy - 1, c);
                    }
                }
                let smooth = acc / 13.0;
                let v = factor * img.get(x, y, c) + (1.0 - factor) * smooth;
                out.set(x, y, c, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_blur(img: &RasterImage, sigma: f64) -> RasterImage {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut tmp = RasterImage::filled(w, h, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * img.get(reflect(x as i64 + k as i64 - radius, w), y, c) as f64)
                    .sum();
                tmp.set(x, y, c, acc as f32);
            }
        }
    }
    let mut out = RasterImage::filled(w, h, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * tmp.get(x, reflect(y as i64 + k as i64 - radius, h), c) as f64)
                    .sum();
                out.set(x, y, c, (acc as f32).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
