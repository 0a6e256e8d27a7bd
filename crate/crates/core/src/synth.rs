//! Synthetic line and page images drawn with a 5×7 bitmap font, for tests,
//! demos and sanity training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PageDocument, Point, TextLine};
use crate::lineproc::RasterImage;
use crate::nn::TrainSample;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Rows of each glyph, `#` for ink. Lowercase letters stand on the baseline
/// (the bottom row) and have no descenders.
fn glyph(c: char) -> Option<[&'static str; GLYPH_H]> {
    Some(match c {
        'a' => [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"],
        'b' => ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####."],
        'c' => [".....", ".....", ".####", "#....", "#....", "#....", ".####"],
        'd' => ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####"],
        'e' => [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."],
        'f' => ["..##.", ".#...", "####.", ".#...", ".#...", ".#...", ".#..."],
        'g' => [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."],
        'h' => ["#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#"],
        'i' => ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."],
        'j' => ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."],
        'k' => ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."],
        'l' => [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
        'm' => [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#"],
        'n' => [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#"],
        'o' => [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."],
        'p' => [".....", "####.", "#...#", "#...#", "####.", "#....", "#...."],
        'q' => [".....", ".####", "#...#", "#...#", ".####", "....#", "....#"],
        'r' => [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."],
        's' => [".....", ".....", ".####", "#....", ".###.", "....#", "####."],
        't' => [".#...", ".#...", "####.", ".#...", ".#...", ".#..#", "..##."],
        'u' => [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"],
        'v' => [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
        'w' => [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."],
        'x' => [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
        'y' => [".....", "#...#", "#...#", "#...#", ".####", "....#", ".###."],
        'z' => [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"],
        ' ' => ["....."; GLYPH_H],
        _ => return None,
    })
}

/// Characters the font can draw.
pub fn alphabet() -> Vec<char> {
    ('a'..='z').chain(std::iter::once(' ')).collect()
}

/// Pixel size of one font cell and the colours used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    /// Horizontal and vertical size of one font pixel.
    pub sx: usize,
    pub sy: usize,
    pub paper: f32,
    pub ink: f32,
    /// Amplitude of uniform paper grain. Without it most percentiles of a
    /// sparse line coincide and normalization has no spread to divide by.
    pub grain: f32,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            sx: 4,
            sy: 3,
            paper: 0.85,
            ink: 0.15,
            grain: 0.1,
        }
    }
}

impl Style {
    /// Advance per character, including the one-cell gap.
    pub fn advance(&self) -> usize {
        (GLYPH_W + 1) * self.sx
    }

    pub fn glyph_height(&self) -> usize {
        GLYPH_H * self.sy
    }
}

/// Paper of the given size with grain seeded from `seed`.
pub fn blank(width: usize, height: usize, style: &Style, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RasterImage::filled(width, height, 1, style.paper);
    if style.grain > 0.0 {
        for v in img.pixels_mut() {
            *v = (*v + rng.random_range(-style.grain..=style.grain)).clamp(0.0, 1.0);
        }
    }
    img
}

fn text_seed(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Draws `text` with its baseline (the bottom of the glyphs) on row
/// `baseline_y`, starting at column `x0`. Characters outside the font are
/// skipped as blanks.
pub fn draw_text(img: &mut RasterImage, text: &str, x0: usize, baseline_y: usize, style: &Style) {
    let top = baseline_y + 1 - style.glyph_height().min(baseline_y + 1);
    for (k, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let cx = x0 + k * style.advance();
        for (gy, row) in rows.iter().enumerate() {
            for (gx, b) in row.bytes().enumerate() {
                if b != b'#' {
                    continue;
                }
                for dy in 0..style.sy {
                    for dx in 0..style.sx {
                        let (x, y) = (cx + gx * style.sx + dx, top + gy * style.sy + dy);
                        if x < img.width() && y < img.height() {
                            for ch in 0..img.channels() {
                                img.set(x, y, ch, style.ink);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A single rendered line as a training sample: one character of margin on
/// each side and the baseline at 73% of the height.
pub fn line_sample(text: &str, style: &Style) -> TrainSample {
    let height = (style.glyph_height() as f64 / 0.6).round() as usize;
    let baseline_row = (0.73 * height as f64).round() as usize;
    let width = (text.chars().count() + 2) * style.advance();
    let mut img = blank(width, height, style, text_seed(text));
    draw_text(&mut img, text, style.advance(), baseline_row, style);
    TrainSample {
        crop: img,
        baseline_row,
        text: text.to_string(),
    }
}

/// `n` random strings of `len` letters, reproducible from `seed`.
pub fn random_words(n: usize, len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect())
        .collect()
}

/// A page with one line of text per entry, evenly spaced, plus the matching
/// document with exact baselines and transcriptions.
pub fn page(lines: &[&str], style: &Style, image_ref: &str) -> (RasterImage, PageDocument) {
    let spacing = style.glyph_height() * 2;
    let margin = style.advance() * 2;
    let longest = lines.iter().map(|l| l.chars().count()).max().unwrap_or(1).max(1);
    let width = 2 * margin + longest * style.advance();
    let height = spacing * (lines.len() + 1);
    let mut img = blank(width, height, style, text_seed(&lines.concat()));
    let mut doc = PageDocument::new(image_ref, width as u32, height as u32);
    for (i, text) in lines.iter().enumerate() {
        let y = spacing * (i + 1) - 1;
        draw_text(&mut img, text, margin, y, style);
        let x1 = margin + text.chars().count().max(1) * style.advance();
        let baseline = vec![Point::new(margin as i32, y as i32), Point::new(x1 as i32, y as i32)];
        doc.lines
            .push(TextLine::new(format!("l{}", i + 1), baseline).with_text(text));
    }
    (img, doc)
}
