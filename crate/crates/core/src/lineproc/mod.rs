//! Line image extraction: baseline spacing, rectified crops, normalization,
//! augmentation and heatmap vectorization.
//!
//! A line is cut as a fixed band around its baseline whose height depends only
//! on the page's median baseline spacing `H`: `round(0.73H)` rows above,
//! `round(0.23H)` rows below. Each column is shifted so the baseline becomes
//! a straight row, then the crop is converted to gray, background-subtracted
//! and inverted.

mod augment;
mod extract;
mod heatmap;
mod raster;

pub use augment::{apply_augmentation, augment_line, sample_finish, AugmentParams, Finish};
pub use extract::{
    baseline_mean_y, baseline_y, extract_line, median_baseline_spacing, normalize_line,
    resize_to_height, BaselineSpacing, LineCrop, NormalizedLine, ABOVE_FRACTION, BELOW_FRACTION,
    FALLBACK_SPACING, NORMALIZE_EPS,
};
pub use heatmap::{vectorize_heatmaps, HeatmapTriple, VectorizeConfig};
pub use raster::{percentile_sorted, RasterImage, LUMA};

#[derive(Debug, thiserror::Error)]
pub enum LineError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("expected {expected} values, got {got}")]
    PixelCount { expected: usize, got: usize },
    #[error("non-finite pixel value")]
    NonFinite,
    #[error("no baselines")]
    NoBaselines,
    #[error("baseline has zero x-extent or non-increasing x")]
    DegenerateBaseline,
    #[error("invalid baseline spacing {0}")]
    BadSpacing(f64),
    #[error("crop rectangle outside the image")]
    CropOutOfBounds,
    #[error("image decoding failed: {0}")]
    Image(String),
}
