use super::logits::LogitMatrix;
use super::model::Model;
use super::spec::Shape;
use super::tensor::Tensor;
use super::weights::ModelWeights;
use super::NnError;
use crate::corpus::Charset;
use crate::lineproc::{resize_to_height, NormalizedLine};

/// A sequence model paired with the charset its output classes index.
#[derive(Debug, Clone)]
pub struct Recognizer {
    model: Model,
    charset: Charset,
    height: usize,
    min_width: usize,
}

impl Recognizer {
    pub fn new(model: Model, charset: Charset) -> Result<Self, NnError> {
        let spec = model.spec();
        let height = spec
            .input_height
            .ok_or_else(|| NnError::Config("recognizer needs a fixed input height".into()))?;
        match spec.output_classes() {
            Some(n) if n == charset.num_classes() => {}
            other => {
                return Err(NnError::Config(format!(
                    "model outputs {other:?} classes, charset needs {}",
                    charset.num_classes()
                )))
            }
        }
        let min_width = spec.min_width();
        Ok(Recognizer {
            model,
            charset,
            height,
            min_width,
        })
    }

    pub fn from_weights(w: &ModelWeights) -> Result<Self, NnError> {
        let charset = w
            .charset
            .clone()
            .ok_or_else(|| NnError::Format("weights carry no charset".into()))?;
        Recognizer::new(w.to_model()?, charset)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn input_height(&self) -> usize {
        self.height
    }

    /// Resizes to the model height; widths below the minimum the network
    /// accepts are padded with background.
    pub fn prepare(&self, line: &NormalizedLine) -> NormalizedLine {
        let mut l = resize_to_height(line, self.height);
        if l.width < self.min_width {
            l = pad_width(&l, self.min_width);
        }
        l
    }

    /// Frames the model emits for an input of this width.
    pub fn frames_for_width(&self, width: usize) -> Result<usize, NnError> {
        self.model.spec().frames_for_width(width)
    }

    pub fn logits(&self, line: &NormalizedLine) -> Result<LogitMatrix, NnError> {
        Ok(self.logits_batch(std::slice::from_ref(line))?.remove(0))
    }

    /// Runs lines as one zero-padded batch; each result is cut to the frame
    /// count of that line's own width.
    pub fn logits_batch(&self, lines: &[NormalizedLine]) -> Result<Vec<LogitMatrix>, NnError> {
        if lines.is_empty() {
            return Ok(Vec::new());
        }
        let prepared: Vec<NormalizedLine> = lines.iter().map(|l| self.prepare(l)).collect();
        let (x, widths) = batch_tensor(&prepared, self.height);
        let y = self.model.forward(&x)?;
        split_logits(&y, &widths, self.model.spec())
    }
}

pub(crate) fn pad_width(line: &NormalizedLine, width: usize) -> NormalizedLine {
    let mut pixels = vec![0.0f32; width * line.height];
    for y in 0..line.height {
        pixels[y * width..y * width + line.width]
            .copy_from_slice(&line.pixels[y * line.width..(y + 1) * line.width]);
    }
    NormalizedLine {
        width,
        height: line.height,
        pixels,
        baseline_row: line.baseline_row,
    }
}

/// Stacks same-height lines into `[B, 1, H, W_max]`, padding with zeros.
pub(crate) fn batch_tensor(lines: &[NormalizedLine], height: usize) -> (Tensor, Vec<usize>) {
    let w = lines.iter().map(|l| l.width).max().unwrap_or(1);
    let mut data = vec![0.0f32; lines.len() * height * w];
    for (b, l) in lines.iter().enumerate() {
        for y in 0..height {
            let dst = (b * height + y) * w;
            data[dst..dst + l.width].copy_from_slice(&l.pixels[y * l.width..(y + 1) * l.width]);
        }
    }
    let widths = lines.iter().map(|l| l.width).collect();
    (
        Tensor::new(vec![lines.len(), 1, height, w], data).expect("batch shape"),
        widths,
    )
}

pub(crate) fn split_logits(
    y: &Tensor,
    widths: &[usize],
    spec: &super::spec::ModelSpec,
) -> Result<Vec<LogitMatrix>, NnError> {
    let (t, c) = (y.shape()[1], y.shape()[2]);
    widths
        .iter()
        .enumerate()
        .map(|(b, &w)| {
            let frames = match spec.output_shape(spec.input_height.unwrap_or(1), w)? {
                Shape::Seq { t, .. } => t,
                Shape::Map { .. } => return Err(NnError::Shape("model does not output a sequence".into())),
            }
            .min(t);
            let rows = &y.data()[b * t * c..(b * t + frames) * c];
            LogitMatrix::new(frames, c, rows.iter().map(|&v| v as f64).collect())
        })
        .collect()
}
