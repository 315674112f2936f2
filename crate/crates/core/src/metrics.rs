//! Segmentation accuracy metrics and the communication/compression ledger.

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::loss::IGNORE_INDEX;
use crate::model::{count_parameters, LogitMap, WeightSet};
use crate::partition::ClientId;
use crate::tensor::Real;

/// Per-pixel argmax over the class axis, flattened `(batch, h, w)`.
pub fn argmax_classes<F: Real>(logits: &LogitMap<F>) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("logits must be rank 4, got {s:?}")));
    }
    let (k, plane) = (s[1], s[2] * s[3]);
    let data = logits.data();
    let mut out = Vec::with_capacity(s[0] * plane);
    for b in 0..s[0] {
        for p in 0..plane {
            let base = b * k * plane + p;
            let mut best = 0;
            for c in 1..k {
                if data[base + c * plane] > data[base + best * plane] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Fraction of non-ignored pixels whose prediction equals the mask.
pub fn pixel_accuracy(pred: &[u8], mask: &[u8]) -> Result<f64> {
    if pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, mask has {}",
            pred.len(),
            mask.len()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &m) in pred.iter().zip(mask) {
        if m == IGNORE_INDEX {
            continue;
        }
        total += 1;
        hit += (p == m) as usize;
    }
    if total == 0 {
        return Err(Error::Metrics("every pixel is ignored; accuracy undefined".into()));
    }
    Ok(hit as f64 / total as f64)
}

pub fn logit_pixel_accuracy<F: Real>(logits: &LogitMap<F>, mask: &[u8]) -> Result<f64> {
    pixel_accuracy(&argmax_classes(logits)?, mask)
}

/// Mean intersection-over-union across classes that occur in either the
/// prediction or the mask (ignored pixels excluded).
pub fn mean_iou(pred: &[u8], mask: &[u8], num_classes: usize) -> Result<f64> {
    if pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, mask has {}",
            pred.len(),
            mask.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut any = false;
    for (&p, &m) in pred.iter().zip(mask) {
        if m == IGNORE_INDEX {
            continue;
        }
        any = true;
        let (p, m) = (p as usize, m as usize);
        if p >= num_classes || m >= num_classes {
            return Err(Error::Metrics(format!("class out of range for {num_classes} classes")));
        }
        if p == m {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[m] += 1;
        }
    }
    if !any {
        return Err(Error::Metrics("every pixel is ignored; IoU undefined".into()));
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub teacher_params: usize,
    pub student_params: usize,
    pub teacher_bytes: usize,
    pub student_bytes: usize,
    pub parameter_ratio: f64,
    pub space_ratio: f64,
}

/// Teacher-to-student ratios from exact parameter counts and exact
/// container sizes.
pub fn compression_report(teacher: &WeightSet, student: &WeightSet) -> Result<CompressionReport> {
    if teacher.is_empty() || student.is_empty() {
        return Err(Error::InvalidArgument(
            "compression report needs non-empty weight sets".into(),
        ));
    }
    let teacher_params = count_parameters(teacher);
    let student_params = count_parameters(student);
    let teacher_bytes = container::encoded_len(teacher);
    let student_bytes = container::encoded_len(student);
    Ok(CompressionReport {
        teacher_params,
        student_params,
        teacher_bytes,
        student_bytes,
        parameter_ratio: teacher_params as f64 / student_params as f64,
        space_ratio: teacher_bytes as f64 / student_bytes as f64,
    })
}

/// One optimizer step of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    /// Epoch index counted from the start of training (cumulative across
    /// rounds).
    pub epoch: usize,
    pub batch: usize,
    /// Absent for purely supervised training.
    pub distillation: Option<f64>,
    pub criterion: f64,
    pub combined: f64,
    /// Accuracy of the pre-step prediction on the batch.
    pub pixel_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundRecord {
    pub client_id: ClientId,
    pub samples: usize,
    pub batches: Vec<BatchRecord>,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ClientRoundRecord {
    pub fn mean_distillation(&self) -> Option<f64> {
        mean(self.batches.iter().filter_map(|b| b.distillation))
    }

    pub fn mean_criterion(&self) -> Option<f64> {
        mean(self.batches.iter().map(|b| b.criterion))
    }

    pub fn mean_combined(&self) -> Option<f64> {
        mean(self.batches.iter().map(|b| b.combined))
    }

    pub fn mean_pixel_accuracy(&self) -> Option<f64> {
        mean(self.batches.iter().filter_map(|b| b.pixel_accuracy))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRoundRecord>,
    pub validation_accuracy: Option<f64>,
    pub validation_mean_iou: Option<f64>,
}
