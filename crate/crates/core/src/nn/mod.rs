//! A small CPU neural engine: the layers of a CNN+LSTM line recognizer,
//! CTC loss, AdamW with a plateau schedule, and a portable weight container.
//!
//! Activations are batch-first: feature maps are `[B, C, H, W]` and frame
//! sequences `[B, T, F]`, row-major `f32`.

mod ctc;
mod gemm;
mod layers;
mod logits;
mod model;
mod optim;
mod recognizer;
mod spec;
mod tensor;
mod train;
mod weights;

pub use ctc::{ctc_loss, min_frames, CtcOutput};
pub use logits::{log_add, log_sum_exp, LogitMatrix};
pub use model::{Model, Tape};
pub use optim::{AdamW, PlateauSchedule};
pub use recognizer::Recognizer;
pub use spec::{
    build_fiducial_model, build_recognizer, build_segmentation_model, Axis, LayerSpec, ModelSpec,
    RecognizerConfig, Shape, SEGMENTATION_WIDTH,
};
pub use tensor::Tensor;
pub use train::{
    prepare_line, train, train_on_samples, train_samples, EpochRecord, History, TrainConfig,
    TrainSample,
};
pub use weights::{
    load_weights, read_tensors, save_weights, write_tensors, LoadOptions, ModelWeights,
    WEIGHTS_FORMAT,
};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid target: {0}")]
    Target(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what} hash mismatch: file has {found}, expected {expected}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Line(#[from] crate::lineproc::LineError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}
