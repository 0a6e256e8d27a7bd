//! Page-level glue: baselines from the segmentation network, and text for
//! every baseline from the recognizer and decoder.

use serde::{Deserialize, Serialize};

use crate::corpus::Point;
use crate::decode::{beam_decode, greedy_decode, DecodeConfig, DecodeError};
use crate::lineproc::{
    baseline_mean_y, extract_line, median_baseline_spacing, normalize_line, vectorize_heatmaps,
    HeatmapTriple, LineError, NormalizedLine, RasterImage, VectorizeConfig,
};
use crate::lm::NGramModel;
use crate::nn::{Model, NnError, Recognizer, Tensor, SEGMENTATION_WIDTH};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Line(#[from] LineError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("line {index}: {source}")]
    AtLine {
        index: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// Pages are resampled to this width before the network runs.
    pub width: usize,
    pub vectorize: VectorizeConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            width: SEGMENTATION_WIDTH,
            vectorize: VectorizeConfig::default(),
        }
    }
}

/// `[1, 3, H, W]` planar tensor from an interleaved image.
fn page_tensor(img: &RasterImage) -> Tensor {
    let rgb = img.to_rgb();
    let (w, h) = (rgb.width(), rgb.height());
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in rgb.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c];
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("shape matches data")
}

/// Maps polylines from heatmap coordinates back onto a `width × height` page
/// and drops those that no longer have two points with increasing x.
pub fn rescale_baselines(
    lines: Vec<Vec<Point>>,
    map_width: usize,
    map_height: usize,
    width: usize,
    height: usize,
) -> Vec<Vec<Point>> {
    let sx = width as f64 / map_width as f64;
    let sy = height as f64 / map_height as f64;
    let max_x = width.saturating_sub(1) as f64;
    let max_y = height.saturating_sub(1) as f64;
    lines
        .into_iter()
        .filter_map(|line| {
            let mut out: Vec<Point> = Vec::with_capacity(line.len());
            for p in line {
                let x = ((p.x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x).round() as i32;
                let y = ((p.y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y).round() as i32;
                if out.last().is_none_or(|q| x > q.x) {
                    out.push(Point::new(x, y));
                }
            }
            (out.len() >= 2).then_some(out)
        })
        .collect()
}

/// Runs the segmentation network on a page and returns baselines in page
/// coordinates, top to bottom.
pub fn segment_page(
    image: &RasterImage,
    model: &Model,
    cfg: &SegmentConfig,
) -> Result<Vec<Vec<Point>>, PipelineError> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(LineError::EmptyImage.into());
    }
    let rw = cfg.width.max(1);
    let rh = ((h as f64 * rw as f64 / w as f64).round() as usize).max(1);
    let x = page_tensor(&image.resize(rw, rh)?);
    let y = model.forward(&x)?;
    let shape = y.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
        return Err(NnError::Shape(format!("segmentation output {shape:?}, expected [1, 3, h, w]")).into());
    }
    let (mh, mw) = (shape[2], shape[3]);
    let n = mh * mw;
    let d = y.data();
    let maps = HeatmapTriple::new(
        mw,
        mh,
        d[..n].to_vec(),
        d[n..2 * n].to_vec(),
        d[2 * n..].to_vec(),
    )?;
    let lines = vectorize_heatmaps(&maps, &cfg.vectorize);
    Ok(rescale_baselines(lines, mw, mh, w, h))
}

/// Stable top-to-bottom order of baselines by mean height.
pub fn reading_order<B: AsRef<[Point]>>(baselines: &[B]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..baselines.len()).collect();
    idx.sort_by(|&a, &b| {
        baseline_mean_y(baselines[a].as_ref()).total_cmp(&baseline_mean_y(baselines[b].as_ref()))
    });
    idx
}

/// Rectified, normalized crops for every baseline, in the given order.
pub fn extract_lines<B: AsRef<[Point]>>(
    image: &RasterImage,
    baselines: &[B],
) -> Result<Vec<NormalizedLine>, PipelineError> {
    let spacing = median_baseline_spacing(baselines, image.height())?;
    baselines
        .iter()
        .enumerate()
        .map(|(index, b)| {
            extract_line(image, b.as_ref(), spacing)
                .map(|c| normalize_line(&c.image, c.baseline_row))
                .map_err(|e| PipelineError::AtLine {
                    index,
                    source: Box::new(e.into()),
                })
        })
        .collect()
}

/// Recognizer plus decoding settings. Greedy decoding is used unless
/// `beam` is set; the language model only takes effect with the beam.
#[derive(Debug, Clone)]
pub struct Transcriber {
    pub recognizer: Recognizer,
    pub lm: Option<NGramModel>,
    pub decode: DecodeConfig,
    pub beam: bool,
}

impl Transcriber {
    pub fn greedy(recognizer: Recognizer) -> Self {
        Transcriber {
            recognizer,
            lm: None,
            decode: DecodeConfig::default(),
            beam: false,
        }
    }

    pub fn with_beam(recognizer: Recognizer, lm: Option<NGramModel>, decode: DecodeConfig) -> Self {
        Transcriber {
            recognizer,
            lm,
            decode,
            beam: true,
        }
    }

    /// Text of one normalized line. Each line runs as its own batch so the
    /// result does not depend on which other lines are processed with it.
    pub fn transcribe_line(&self, line: &NormalizedLine) -> Result<String, PipelineError> {
        let logits = self.recognizer.logits(line)?;
        let charset = self.recognizer.charset();
        if self.beam {
            let hyps = beam_decode(&logits, charset, self.lm.as_ref(), &self.decode)?;
            Ok(hyps.into_iter().next().map(|h| h.text).unwrap_or_default())
        } else {
            Ok(greedy_decode(&logits, charset)?)
        }
    }

    /// Texts for a set of lines, spread over up to `jobs` threads. Output order
    /// follows input order regardless of `jobs`.
    pub fn transcribe_lines(&self, lines: &[NormalizedLine], jobs: usize) -> Result<Vec<String>, PipelineError> {
        let jobs = jobs.clamp(1, lines.len().max(1));
        let run = |(index, l): (usize, &NormalizedLine)| {
            self.transcribe_line(l).map_err(|e| PipelineError::AtLine {
                index,
                source: Box::new(e),
            })
        };
        if jobs == 1 {
            return lines.iter().enumerate().map(run).collect();
        }
        let chunk = lines.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<String>, PipelineError>> = std::thread::scope(|s| {
            let handles: Vec<_> = lines
                .chunks(chunk)
                .enumerate()
                .map(|(ci, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(i, l)| run((ci * chunk + i, l)))
                            .collect::<Result<Vec<_>, _>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(lines.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Extracts every baseline of a page and transcribes it, keeping the
    /// order of `baselines`.
    pub fn transcribe_page<B: AsRef<[Point]>>(
        &self,
        image: &RasterImage,
        baselines: &[B],
        jobs: usize,
    ) -> Result<Vec<String>, PipelineError> {
        let lines = extract_lines(image, baselines)?;
        self.transcribe_lines(&lines, jobs)
    }
}
