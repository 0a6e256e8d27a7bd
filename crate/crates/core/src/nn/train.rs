//! Supervised CTC training of a line recognizer.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctc::ctc_loss;
use super::logits::LogitMatrix;
use super::model::Model;
use super::optim::{AdamW, PlateauSchedule};
use super::recognizer::{batch_tensor, pad_width, split_logits};
use super::spec::{build_recognizer, RecognizerConfig};
use super::tensor::Tensor;
use super::weights::ModelWeights;
use super::NnError;
use crate::corpus::{Charset, DatasetManifest};
use crate::decode::greedy_decode;
use crate::eval::ErrorTally;
use crate::lineproc::{
    augment_line, extract_line, median_baseline_spacing, normalize_line, resize_to_height,
    NormalizedLine, RasterImage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without a strict validation WER improvement before the
    /// learning rate drops.
    pub patience: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the training lines held out to drive the schedule. When the
    /// holdout rounds to nothing, validation runs on the training lines.
    pub validation_fraction: f64,
    pub augment: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop once validation CER (percent) falls below this.
    pub stop_below_cer: Option<f64>,
    pub model: RecognizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            patience: 10,
            lr_factor: 1.0 / 3.0,
            lr_min: 1e-5,
            max_epochs: 250,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.1,
            augment: true,
            grad_clip: None,
            stop_below_cer: None,
            model: RecognizerConfig::fiducial(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return bad("lr_min must lie in (0, lr]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// A rectified but not yet normalized line crop with its transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub crop: RasterImage,
    pub baseline_row: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-character CTC loss over the epoch's batches.
    pub loss: f64,
    pub cer: f64,
    pub wer: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Columns: epoch, loss, cer, wer, lr.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,cer,wer,lr\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.4},{:.4},{:e}", r.epoch, r.loss, r.cer, r.wer, r.lr);
        }
        out
    }
}

/// Crop → optional augmentation → normalization → model height.
pub fn prepare_line(sample: &TrainSample, height: usize, augment_seed: Option<u64>) -> NormalizedLine {
    let line = match augment_seed {
        Some(seed) => normalize_line(&augment_line(&sample.crop, seed), sample.baseline_row),
        None => normalize_line(&sample.crop, sample.baseline_row),
    };
    resize_to_height(&line, height)
}

/// Extracts the crops of every training line, using each page's median
/// baseline spacing.
pub fn train_samples(manifest: &DatasetManifest) -> Result<Vec<TrainSample>, NnError> {
    let mut out = Vec::with_capacity(manifest.train.len());
    let mut current: Option<(String, RasterImage, crate::lineproc::BaselineSpacing)> = None;
    for r in &manifest.train {
        let page = manifest
            .pages
            .get(&r.page)
            .ok_or_else(|| NnError::Config(format!("page {} not in manifest", r.page)))?;
        if current.as_ref().map(|c| &c.0) != Some(&r.page) {
            let path = manifest
                .image_path(&r.page)
                .ok_or_else(|| NnError::Config(format!("page {} has no image", r.page)))?;
            let image = RasterImage::open(&path)?;
            let baselines: Vec<&[crate::corpus::Point]> =
                page.lines.iter().map(|l| l.baseline.as_slice()).collect();
            let spacing = median_baseline_spacing(&baselines, image.height())?;
            current = Some((r.page.clone(), image, spacing));
        }
        let (_, image, spacing) = current.as_ref().expect("page loaded");
        let line = manifest
            .line(r)
            .ok_or_else(|| NnError::Config(format!("line {}/{} not found", r.page, r.line)))?;
        let crop = extract_line(image, &line.baseline, *spacing)?;
        out.push(TrainSample {
            crop: crop.image,
            baseline_row: crop.baseline_row,
            text: line.transcription.clone().unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Trains a recognizer on the training split of `manifest`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(ModelWeights, History), NnError> {
    let samples = train_samples(manifest)?;
    train_on_samples(&samples, &manifest.charset, cfg, |_| {})
}

fn augment_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32 | index as u64)
}

struct Prepared {
    line: NormalizedLine,
    target: Vec<u32>,
    text: String,
}

/// Trains on in-memory samples. `on_epoch` sees each record as it is made.
pub fn train_on_samples(
    samples: &[TrainSample],
    charset: &Charset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelWeights, History), NnError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NnError::Config("no training samples".into()));
    }
    let spec = build_recognizer(&cfg.model, charset.len());
    let height = cfg.model.input_height;
    let min_width = spec.min_width();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&spec, &mut rng)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.validation_fraction).round() as usize).min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let prepare = |i: usize, seed: Option<u64>| -> Result<Prepared, NnError> {
        let s = &samples[i];
        let mut line = prepare_line(s, height, seed);
        if line.width < min_width {
            line = pad_width(&line, min_width);
        }
        Ok(Prepared {
            line,
            target: charset.encode(&s.text)?,
            text: s.text.clone(),
        })
    };
    let validation: Vec<Prepared> = val_idx.iter().map(|&i| prepare(i, None)).collect::<Result<_, _>>()?;
    // without augmentation every epoch sees the same inputs
    let fixed: Option<Vec<Prepared>> = if cfg.augment {
        None
    } else {
        Some(samples.iter().enumerate().map(|(i, _)| prepare(i, None)).collect::<Result<_, _>>()?)
    };

    let mut adam = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.lr_factor, cfg.patience, cfg.lr_min);
    let mut history = History::default();
    let mut epoch_order = train_idx.to_vec();

    for epoch in 1..=cfg.max_epochs {
        epoch_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in epoch_order.chunks(cfg.batch_size).enumerate() {
            let owned: Vec<Prepared>;
            let batch: Vec<&Prepared> = match &fixed {
                Some(f) => chunk.iter().map(|&i| &f[i]).collect(),
                None => {
                    owned = chunk
                        .iter()
                        .map(|&i| prepare(i, Some(augment_seed(cfg.seed, epoch, i))))
                        .collect::<Result<_, _>>()?;
                    owned.iter().collect()
                }
            };
            let Some(loss) = train_batch(&mut model, &mut adam, &batch, cfg, &mut rng)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(NnError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        let (cer, wer) = validate(&model, &validation, charset, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            cer,
            wer,
            lr: adam.lr,
        };
        tracing::info!(epoch, loss = record.loss, cer, wer, lr = adam.lr, "epoch done");
        on_epoch(&record);
        history.epochs.push(record);
        adam.lr = schedule.observe(wer);
        if cfg.stop_below_cer.is_some_and(|t| cer < t) {
            break;
        }
    }
    Ok((ModelWeights::from_model(&model, Some(charset.clone())), history))
}

/// One optimizer step. Returns the batch loss, or `None` when no sample in
/// the batch has enough frames for its target.
fn train_batch(
    model: &mut Model,
    adam: &mut AdamW,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>, NnError> {
    let lines: Vec<NormalizedLine> = batch.iter().map(|p| p.line.clone()).collect();
    let (x, widths) = batch_tensor(&lines, cfg.model.input_height);
    let (y, tape) = model.forward_train(&x, rng)?;
    let logits = split_logits(&y, &widths, model.spec())?;
    let (t_max, classes) = (y.shape()[1], y.shape()[2]);

    let mut outputs = Vec::with_capacity(batch.len());
    for (m, p) in logits.iter().zip(batch) {
        let out = ctc_loss(m, &p.target, true)?;
        outputs.push(out.feasible.then_some(out));
    }
    let feasible = outputs.iter().flatten().count();
    if feasible == 0 {
        return Ok(None);
    }
    let mut dy = vec![0.0f32; y.len()];
    let mut loss = 0.0;
    for (b, (out, p)) in outputs.iter().zip(batch).enumerate() {
        let Some(out) = out else { continue };
        let scale = 1.0 / (p.target.len().max(1) * feasible) as f64;
        loss += out.loss * scale;
        let grad = out.grad.as_ref().expect("gradient requested");
        let dst = &mut dy[b * t_max * classes..];
        for (d, g) in dst.iter_mut().zip(grad) {
            *d = (g * scale) as f32;
        }
    }
    if !loss.is_finite() {
        return Ok(Some(loss));
    }
    model.zero_grad();
    model.backward(tape, Tensor::new(y.shape().to_vec(), dy)?);
    let mut params = model.params_mut();
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Ok(Some(f64::NAN));
    }
    if let Some(clip) = cfg.grad_clip {
        if norm > clip {
            let s = (clip / norm) as f32;
            for p in params.iter_mut() {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    drop(params);
    adam.step(model);
    Ok(Some(loss))
}

/// Greedy-decodes the validation lines and returns (CER, WER) in percent.
fn validate(model: &Model, lines: &[Prepared], charset: &Charset, batch: usize) -> Result<(f64, f64), NnError> {
    let mut tally = ErrorTally::default();
    for chunk in lines.chunks(batch) {
        let owned: Vec<NormalizedLine> = chunk.iter().map(|p| p.line.clone()).collect();
        let (x, widths) = batch_tensor(&owned, model.spec().input_height.unwrap_or(1));
        let y = model.forward(&x)?;
        let logits: Vec<LogitMatrix> = split_logits(&y, &widths, model.spec())?;
        for (m, p) in logits.iter().zip(chunk) {
            let hyp = greedy_decode(m, charset).map_err(|e| NnError::Shape(e.to_string()))?;
            tally.add(ErrorTally::of(&p.text, &hyp));
        }
    }
    Ok((tally.cer(), tally.wer()))
}
