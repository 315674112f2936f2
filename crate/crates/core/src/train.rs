//! Local training: mini-batch SGD over a sample list with either a purely
//! supervised objective or the distillation-mixed objective.
//!
//! Batch order per epoch is a pure function of `(seed, stream, epoch)`, so a
//! run split into several calls (one per federation round) visits batches in
//! the same order as one uninterrupted call.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::loss::{
    combined_gradient, combined_loss, criterion_loss_grad, pixelwise_distillation_loss_grad, DistillationConfig,
};
use crate::metrics::{argmax_classes, logit_pixel_accuracy, mean_iou, pixel_accuracy, BatchRecord};
use crate::model::{LogitMap, Unet, WeightSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Shuffle stream; federated clients use their client id.
    pub stream: u64,
    /// Epoch index the first epoch of this call is numbered with.
    pub epoch_offset: usize,
    pub max_steps: Option<usize>,
}

impl TrainSettings {
    pub fn new(epochs: usize, batch_size: usize, step_size: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            step_size,
            seed,
            stream: 0,
            epoch_offset: 0,
            max_steps: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

pub enum Objective<'a> {
    Supervised,
    /// `teacher_logits[i]` is the frozen teacher's `(1, K, h, w)` output for
    /// sample `i`.
    Distillation {
        teacher_logits: &'a [LogitMap],
        config: DistillationConfig,
    },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample visiting order for one epoch.
pub fn epoch_order(seed: u64, stream: u64, epoch: usize, n: usize) -> Vec<usize> {
    let key = splitmix(splitmix(splitmix(seed) ^ stream) ^ epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    order
}

pub(crate) fn stack_batch(data: &[SegmentationSample], idx: &[usize]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
    let labels = idx.iter().flat_map(|&i| data[i].mask.data().iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

fn stack_logits(maps: &[LogitMap], idx: &[usize]) -> Result<LogitMap> {
    let mut data = Vec::new();
    let mut shape = None;
    for &i in idx {
        let m = &maps[i];
        let s = m.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Shape(format!(
                "teacher logits for one sample must be (1, K, h, w), got {s:?}"
            )));
        }
        shape.get_or_insert_with(|| s.to_vec());
        data.extend_from_slice(m.data());
    }
    let mut shape = shape.ok_or_else(|| Error::Shape("empty batch".into()))?;
    shape[0] = idx.len();
    Tensor::from_vec(&shape, data)
}

/// Runs `settings.epochs` epochs of SGD starting from `weights`.
pub fn train(
    model: &Unet,
    mut weights: WeightSet,
    data: &[SegmentationSample],
    objective: &Objective<'_>,
    settings: &TrainSettings,
) -> Result<(WeightSet, Vec<BatchRecord>)> {
    settings.validate()?;
    model.check_weights(&weights)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if let Objective::Distillation { teacher_logits, config } = objective {
        config.validate()?;
        if teacher_logits.len() != data.len() {
            return Err(Error::Shape(format!(
                "{} teacher logit maps for {} samples",
                teacher_logits.len(),
                data.len()
            )));
        }
    }
    let step = settings.step_size as f32;
    let mut records = Vec::new();
    let mut steps = 0usize;
    for e in 0..settings.epochs {
        let epoch = settings.epoch_offset + e;
        let order = epoch_order(settings.seed, settings.stream, epoch, data.len());
        for (b, idx) in order.chunks(settings.batch_size).enumerate() {
            if settings.max_steps.is_some_and(|m| steps >= m) {
                return Ok((weights, records));
            }
            let (batch, labels) = stack_batch(data, idx)?;
            let (logits, cache) = model.forward_train(&weights, &batch)?;
            let accuracy = logit_pixel_accuracy(&logits, &labels).ok();
            let (lc, gc) = criterion_loss_grad(&logits, &labels)?;
            let (distillation, combined, grad) = match objective {
                Objective::Supervised => (None, lc.value, gc),
                Objective::Distillation { teacher_logits, config } => {
                    let teacher = stack_logits(teacher_logits, idx)?;
                    let (lp, gp) = pixelwise_distillation_loss_grad(&logits, &teacher, config.temperature)?;
                    let lt = combined_loss(lp, lc, config.alpha)?;
                    let g = combined_gradient(Some(&gp), &gc, config.alpha)?;
                    (Some(lp.value), lt.value, g)
                }
            };
            let grads = model.backward(&weights, &cache, &grad)?;
            weights.sgd_step(&grads, step);
            if !weights.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "weights became non-finite at epoch {epoch}, batch {b}; lower the step size"
                )));
            }
            records.push(BatchRecord {
                epoch,
                batch: b,
                distillation,
                criterion: lc.value,
                combined,
                pixel_accuracy: accuracy,
            });
            steps += 1;
        }
    }
    Ok((weights, records))
}

/// Per-sample logits `(1, K, h, w)`.
pub fn predict_each(model: &Unet, weights: &WeightSet, data: &[SegmentationSample]) -> Result<Vec<LogitMap>> {
    data.par_iter()
        .map(|s| {
            let batch = Tensor::stack(&[&s.image])?;
            model.forward(weights, &batch)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

/// Pixel accuracy and mean IoU pooled over every pixel of `data`.
pub fn evaluate(model: &Unet, weights: &WeightSet, data: &[SegmentationSample]) -> Result<Evaluation> {
    let logits = predict_each(model, weights, data)?;
    let mut pred = Vec::new();
    let mut mask = Vec::new();
    for (l, s) in logits.iter().zip(data) {
        pred.extend(argmax_classes(l)?);
        mask.extend_from_slice(s.mask.data());
    }
    Ok(Evaluation {
        pixel_accuracy: pixel_accuracy(&pred, &mask)?,
        mean_iou: mean_iou(&pred, &mask, model.spec().num_classes)?,
    })
}
