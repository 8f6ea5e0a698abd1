//! Regression metrics on predicted vs. expert scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPrediction {
    pub session_id: String,
    pub predicted: f64,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub pearson_r: f64,
    /// False when either side is constant; `pearson_r` is then 0.
    pub r_defined: bool,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub predictions: Vec<SessionPrediction>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn metrics(preds: &[f64], labels: &[f64]) -> Result<EvalReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Statistic {
            statistic: "metrics".into(),
            message: format!("{} predictions vs {} labels", preds.len(), labels.len()),
        });
    }
    let n = preds.len() as f64;
    let r = pearson(preds, labels);
    let mse = preds.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / n;
    let mae = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / n;
    let mean = labels.iter().sum::<f64>() / n;
    let ss_tot: f64 = labels.iter().map(|l| (l - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - mse * n / ss_tot } else { 0.0 };
    Ok(EvalReport {
        n: preds.len(),
        pearson_r: r.unwrap_or(0.0),
        r_defined: r.is_some(),
        rmse: mse.sqrt(),
        mae,
        r2,
        predictions: Vec::new(),
    })
}

/// [`metrics`] keeping the per-session rows.
pub fn evaluate_predictions(rows: Vec<SessionPrediction>) -> Result<EvalReport> {
    let p: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.label).collect();
    let mut report = metrics(&p, &l)?;
    report.predictions = rows;
    Ok(report)
}
