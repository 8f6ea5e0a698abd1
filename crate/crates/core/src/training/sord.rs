//! Soft ordinal targets and the matching cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::attention::NUM_CLASSES;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Absolute,
    #[default]
    Squared,
}

impl Distance {
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Distance::Absolute => (a - b).abs(),
            Distance::Squared => (a - b).powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SordConfig {
    pub distance: Distance,
    pub alpha: f64,
}

impl Default for SordConfig {
    fn default() -> Self {
        Self {
            distance: Distance::Squared,
            alpha: 1.0,
        }
    }
}

impl SordConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "sord alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `softmax_k(-alpha * phi(true_class, k))` over classes `1..=num_classes`.
pub fn sord_targets_k(
    true_class: i32,
    num_classes: usize,
    distance: Distance,
    alpha: f64,
) -> Result<Vec<f64>> {
    if true_class < 1 || true_class as usize > num_classes {
        return Err(Error::Config(format!(
            "true score {true_class} outside 1..={num_classes}"
        )));
    }
    let logits: Vec<f64> = (1..=num_classes)
        .map(|k| -alpha * distance.eval(true_class as f64, k as f64))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn sord_targets(true_score: i32, cfg: &SordConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    sord_targets_k(true_score, NUM_CLASSES, cfg.distance, cfg.alpha)
}

fn check_targets(targets: &[f64]) -> Result<()> {
    let total: f64 = targets.iter().sum();
    if (total - 1.0).abs() > 1e-6 || targets.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Config(format!(
            "targets must form a distribution (sum {total})"
        )));
    }
    Ok(())
}

/// `-sum_k t_k log softmax(logits)_k`.
pub fn sord_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(
            "sord_loss",
            format!("{} logits vs {} targets", logits.len(), targets.len()),
        ));
    }
    check_targets(targets)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(-targets
        .iter()
        .zip(logits)
        .map(|(t, z)| t * (z - lse))
        .sum::<f64>())
}

/// Tape version of [`sord_loss`].
pub fn sord_loss_var(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    check_targets(targets)?;
    tape.soft_cross_entropy(logits, targets)
}
