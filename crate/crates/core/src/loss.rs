//! Training objectives over [`LogitMap`]s: temperature-softened pixelwise
//! distillation, supervised cross-entropy, and their α-weighted mix.
//!
//! Values are accumulated in `f64` regardless of the logit scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LogitMap;
use crate::tensor::{Real, Tensor};

/// Mask value excluded from the supervised loss and from accuracy.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    Distillation,
    Criterion,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub component: LossComponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationConfig {
    pub temperature: f64,
    /// Weight of the distillation term in the combined objective.
    pub alpha: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            alpha: 0.3,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        check_alpha(self.alpha)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Returns (classes, pixels per class plane, total pixels).
fn logit_dims<F: Real>(logits: &LogitMap<F>) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "logits must be (batch, classes, height, width), got {s:?}"
        )));
    }
    let plane = s[2] * s[3];
    Ok((s[1], plane, s[0] * plane))
}

/// Log-softmax of `logits / t` at one pixel, written into `out`.
fn log_softmax_at<F: Real>(data: &[F], base: usize, plane: usize, t: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (k, o) in out.iter_mut().enumerate() {
        *o = data[base + k * plane].to_f64().unwrap_or(f64::NAN) / t;
        max = max.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter() {
        sum += (o - max).exp();
    }
    let lse = max + sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

fn distillation<F: Real>(
    student: &LogitMap<F>,
    teacher: &LogitMap<F>,
    temperature: f64,
    want_grad: bool,
) -> Result<(LossValue, Option<Tensor<F>>)> {
    check_temperature(temperature)?;
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let (k, plane, pixels) = logit_dims(student)?;
    let (s, t) = (student.data(), teacher.data());
    let mut ls = vec![0.0; k];
    let mut lt = vec![0.0; k];
    let mut grad = want_grad.then(|| Tensor::<F>::zeros(student.shape()));
    let scale = temperature / pixels as f64;
    let mut total = 0.0;
    for p in 0..pixels {
        let base = (p / plane) * k * plane + p % plane;
        log_softmax_at(s, base, plane, temperature, &mut ls);
        log_softmax_at(t, base, plane, temperature, &mut lt);
        for c in 0..k {
            let pt = lt[c].exp();
            if pt > 0.0 {
                total += pt * (lt[c] - ls[c]);
            }
            if let Some(g) = grad.as_mut() {
                g.data_mut()[base + c * plane] = F::lit(scale * (ls[c].exp() - pt));
            }
        }
    }
    let value = (temperature * temperature * total / pixels as f64).max(0.0);
    Ok((
        LossValue {
            value,
            component: LossComponent::Distillation,
        },
        grad,
    ))
}

/// Mean per-pixel `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
/// The teacher side is a constant.
pub fn pixelwise_distillation_loss<F: Real>(
    student: &LogitMap<F>,
    teacher: &LogitMap<F>,
    temperature: f64,
) -> Result<LossValue> {
    distillation(student, teacher, temperature, false).map(|(v, _)| v)
}

/// [`pixelwise_distillation_loss`] plus its gradient with respect to the
/// student logits, `T · (p_s − p_t) / pixels`.
pub fn pixelwise_distillation_loss_grad<F: Real>(
    student: &LogitMap<F>,
    teacher: &LogitMap<F>,
    temperature: f64,
) -> Result<(LossValue, Tensor<F>)> {
    distillation(student, teacher, temperature, true).map(|(v, g)| (v, g.expect("requested")))
}

fn criterion<F: Real>(student: &LogitMap<F>, labels: &[u8], want_grad: bool) -> Result<(LossValue, Option<Tensor<F>>)> {
    let (k, plane, pixels) = logit_dims(student)?;
    if labels.len() != pixels {
        return Err(Error::Shape(format!(
            "mask has {} pixels, logits have {pixels}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= k) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {k} classes"
        )));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    let mut grad = want_grad.then(|| Tensor::<F>::zeros(student.shape()));
    // A fully unlabeled batch contributes nothing.
    if valid == 0 {
        return Ok((
            LossValue {
                value: 0.0,
                component: LossComponent::Criterion,
            },
            grad,
        ));
    }
    let s = student.data();
    let mut ls = vec![0.0; k];
    let mut total = 0.0;
    let inv = 1.0 / valid as f64;
    for (p, &label) in labels.iter().enumerate() {
        if label == IGNORE_INDEX {
            continue;
        }
        let base = (p / plane) * k * plane + p % plane;
        log_softmax_at(s, base, plane, 1.0, &mut ls);
        total -= ls[label as usize];
        if let Some(g) = grad.as_mut() {
            for (c, l) in ls.iter().enumerate() {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                g.data_mut()[base + c * plane] = F::lit(inv * (l.exp() - target));
            }
        }
    }
    Ok((
        LossValue {
            value: total * inv,
            component: LossComponent::Criterion,
        },
        grad,
    ))
}

/// Mean cross-entropy of `softmax(student)` against the mask, skipping
/// [`IGNORE_INDEX`] pixels. `labels` is the flattened `(batch, h, w)` mask.
pub fn criterion_loss<F: Real>(student: &LogitMap<F>, labels: &[u8]) -> Result<LossValue> {
    criterion(student, labels, false).map(|(v, _)| v)
}

pub fn criterion_loss_grad<F: Real>(student: &LogitMap<F>, labels: &[u8]) -> Result<(LossValue, Tensor<F>)> {
    criterion(student, labels, true).map(|(v, g)| (v, g.expect("requested")))
}

/// `α·L_P + (1 − α)·L_C`.
pub fn combined_loss(distill: LossValue, criterion: LossValue, alpha: f64) -> Result<LossValue> {
    check_alpha(alpha)?;
    if !distill.value.is_finite() || !criterion.value.is_finite() {
        return Err(Error::InvalidArgument("loss components must be finite".into()));
    }
    Ok(LossValue {
        value: alpha * distill.value + (1.0 - alpha) * criterion.value,
        component: LossComponent::Combined,
    })
}

/// Gradient of the combined loss given the gradients of its parts. A term
/// whose weight is exactly zero is skipped, so α = 0 reproduces the
/// supervised gradient bit for bit.
pub fn combined_gradient<F: Real>(distill: Option<&Tensor<F>>, criterion: &Tensor<F>, alpha: f64) -> Result<Tensor<F>> {
    check_alpha(alpha)?;
    let Some(distill) = distill.filter(|_| alpha != 0.0) else {
        return Ok(criterion.clone());
    };
    if distill.shape() != criterion.shape() {
        return Err(Error::Shape(format!(
            "distillation gradient {:?} vs criterion gradient {:?}",
            distill.shape(),
            criterion.shape()
        )));
    }
    if alpha == 1.0 {
        return Ok(distill.clone());
    }
    let (a, b) = (F::lit(alpha), F::lit(1.0 - alpha));
    let data = distill
        .data()
        .iter()
        .zip(criterion.data())
        .map(|(&p, &c)| a * p + b * c)
        .collect();
    Tensor::from_vec(criterion.shape(), data)
}
