//! Training objectives over `(num_known + 1)`-way logits.
//!
//! The last logit is the unknown class. Every loss returns its value and its
//! gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, norm, softmax_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature of the smoothed CE term.
    pub temperature: f64,
    /// Weight of the logit-norm penalty.
    pub logit_penalty: f64,
    pub enable_ua: bool,
    pub enable_sce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            logit_penalty: 0.05,
            enable_ua: true,
            enable_sce: true,
        }
    }
}

impl LossConfig {
    /// Plain cross-entropy expressed through the smoothed term.
    pub fn cross_entropy() -> Self {
        Self {
            temperature: 1.0,
            logit_penalty: 0.0,
            enable_ua: false,
            enable_sce: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if self.logit_penalty < 0.0 || !self.logit_penalty.is_finite() {
            return Err(Error::InvalidConfig("logit_penalty must be >= 0".into()));
        }
        if !self.enable_ua && !self.enable_sce {
            return Err(Error::EmptyObjective);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    let num_known = logits.len().saturating_sub(1);
    if y >= num_known {
        return Err(Error::LabelOutOfRange { label: y, num_known });
    }
    Ok(())
}

/// `-log softmax(logits)[y]`.
pub fn ce_loss(logits: &[f64], y: usize) -> Result<LossValue> {
    check_label(logits, y)?;
    let value = log_sum_exp(logits) - logits[y];
    let mut grad = softmax_unchecked(logits, 1.0);
    grad[y] -= 1.0;
    Ok(LossValue { value, grad })
}

/// Unknown activation: `-log(exp(f_u) / sum_{k != y} exp(f_k))`.
///
/// The sum runs over every class except the ground truth, unknown included,
/// so the ground-truth logit receives no gradient.
pub fn ua_loss(logits: &[f64], y: usize) -> Result<LossValue> {
    check_label(logits, y)?;
    let u = logits.len() - 1;
    let competitors: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .collect();
    let lse = log_sum_exp(&competitors);
    let value = lse - logits[u];

    let mut grad = vec![0.0; logits.len()];
    let mut rest = 0.0;
    for (k, &f) in logits.iter().enumerate() {
        if k == y || k == u {
            continue;
        }
        let p = (f - lse).exp();
        grad[k] = p;
        rest += p;
    }
    // p_u - 1 written as the negated mass of the other competitors.
    grad[u] = -rest;
    Ok(LossValue { value, grad })
}

/// Temperature-scaled CE plus `logit_penalty * ||logits||_2`.
///
/// The norm's subgradient at the origin is taken as zero.
pub fn sce_loss(logits: &[f64], y: usize, config: &LossConfig) -> Result<LossValue> {
    check_label(logits, y)?;
    let t = config.temperature;
    if t <= 0.0 || t.is_nan() {
        return Err(Error::InvalidTemperature(t));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    let n = norm(logits);
    let value = log_sum_exp(&scaled) - scaled[y] + config.logit_penalty * n;

    let mut grad = softmax_unchecked(logits, t);
    grad[y] -= 1.0;
    for (g, l) in grad.iter_mut().zip(logits) {
        *g /= t;
        if n > 0.0 {
            *g += config.logit_penalty * l / n;
        }
    }
    Ok(LossValue { value, grad })
}

/// Sum of the enabled unknown-activation and smoothed CE terms.
pub fn ugd_loss(logits: &[f64], y: usize, config: &LossConfig) -> Result<LossValue> {
    if !config.enable_ua && !config.enable_sce {
        return Err(Error::EmptyObjective);
    }
    check_label(logits, y)?;
    let mut total = LossValue {
        value: 0.0,
        grad: vec![0.0; logits.len()],
    };
    let mut add = |part: LossValue| {
        total.value += part.value;
        total.grad.iter_mut().zip(&part.grad).for_each(|(a, b)| *a += b);
    };
    if config.enable_ua {
        add(ua_loss(logits, y)?);
    }
    if config.enable_sce {
        add(sce_loss(logits, y, config)?);
    }
    Ok(total)
}
