//! Permutation-sampling Shapley values with background imputation.
//!
//! One Monte-Carlo sample draws a feature ordering and a background row, starts from the
//! background row, and switches features to the instance's values in order. Each feature's
//! marginal contribution is the change in output when it is switched. Samples are split
//! into fixed chunks with their own RNG stream, so results do not depend on thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::globals::{global_feature_names, NUM_GLOBAL_FEATURES};
use crate::model::{PreparedSession, SkillModel};

const CHUNK: usize = 64;
const MAX_EXACT_DIM: usize = 16;

/// A model output as a function of a feature vector.
pub trait CoalitionValue: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
}

impl<F> CoalitionValue for (usize, F)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((self.1)(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapEstimate {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Mean output over the background rows.
    pub base_value: f64,
    /// Output at the instance.
    pub prediction: f64,
    /// Standard error of `sum(values)` as an estimate of `prediction - base_value`.
    pub sum_std_error: f64,
}

fn check_rows(f: &dyn CoalitionValue, instance: &[f64], background: &[Vec<f64>]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::Dataset("SHAP background is empty".into()));
    }
    let d = f.dim();
    if instance.len() != d || background.iter().any(|r| r.len() != d) {
        return Err(Error::shape(
            "shap",
            format!("feature vectors must all have length {d}"),
        ));
    }
    Ok(())
}

fn base_value(f: &dyn CoalitionValue, background: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for row in background {
        total += f.value(row)?;
    }
    Ok(total / background.len() as f64)
}

pub fn shap_sampling(
    f: &dyn CoalitionValue,
    instance: &[f64],
    background: &[Vec<f64>],
    cfg: &ShapConfig,
) -> Result<ShapEstimate> {
    check_rows(f, instance, background)?;
    if cfg.n_samples == 0 {
        return Err(Error::Config("SHAP needs at least one sample".into()));
    }
    let d = f.dim();
    let chunks = cfg.n_samples.div_ceil(CHUNK);
    // Per sample: d contributions followed by the gap f(x) - f(z).
    let samples: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let n = CHUNK.min(cfg.n_samples - c * CHUNK);
            let mut out = Vec::with_capacity(n * (d + 1));
            let mut order: Vec<usize> = (0..d).collect();
            for _ in 0..n {
                order.shuffle(&mut rng);
                let z = &background[rng.random_range(0..background.len())];
                let mut x = z.clone();
                let start = f.value(&x)?;
                let mut prev = start;
                let mut contrib = vec![0.0; d];
                for &i in &order {
                    x[i] = instance[i];
                    let v = f.value(&x)?;
                    contrib[i] = v - prev;
                    prev = v;
                }
                out.extend_from_slice(&contrib);
                out.push(prev - start);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<f64> = samples.into_iter().flatten().collect();
    let n = cfg.n_samples as f64;
    let stats = |j: usize| {
        let col = flat.iter().skip(j).step_by(d + 1);
        let mean = col.clone().sum::<f64>() / n;
        let var = if cfg.n_samples > 1 {
            col.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, (var / n).sqrt())
    };
    let (values, std_errors): (Vec<f64>, Vec<f64>) = (0..d).map(stats).unzip();
    let (_, sum_std_error) = stats(d);
    Ok(ShapEstimate {
        values,
        std_errors,
        base_value: base_value(f, background)?,
        prediction: f.value(instance)?,
        sum_std_error,
    })
}

/// Exact Shapley values of the background-averaged coalition game, by enumerating every
/// coalition. This is the quantity [`shap_sampling`] estimates.
pub fn exact_shapley(
    f: &dyn CoalitionValue,
    instance: &[f64],
    background: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_rows(f, instance, background)?;
    let d = f.dim();
    if d > MAX_EXACT_DIM {
        return Err(Error::Config(format!(
            "exact Shapley enumeration supports at most {MAX_EXACT_DIM} features"
        )));
    }
    let mut v = vec![0.0; 1 << d];
    for (mask, slot) in v.iter_mut().enumerate() {
        let mut total = 0.0;
        for z in background {
            let x: Vec<f64> = (0..d)
                .map(|i| if mask >> i & 1 == 1 { instance[i] } else { z[i] })
                .collect();
            total += f.value(&x)?;
        }
        *slot = total / background.len() as f64;
    }
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..(1usize << d) {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact(s) * fact(d - s - 1) / fact(d);
            *p += w * (v[mask | 1 << i] - v[mask]);
        }
    }
    Ok(phi)
}

/// Attribution of one session's score to its raw global features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub session_id: String,
    pub feature_names: Vec<String>,
    pub feature_values: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub base_value: f64,
    pub prediction: f64,
}

/// Score as a function of raw global features with the temporal branch fixed.
struct FrozenTemporal<'a> {
    model: &'a SkillModel,
    pooled: Vec<f64>,
}

impl CoalitionValue for FrozenTemporal<'_> {
    fn dim(&self) -> usize {
        NUM_GLOBAL_FEATURES
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.model.score_with_pooled(&self.pooled, x)
    }
}

/// Shapley attribution over the 19 global features, with the instance's pooled temporal
/// representation held fixed and absent features drawn from `background`.
pub fn explain_global(
    model: &SkillModel,
    background: &[PreparedSession],
    instance: &PreparedSession,
    cfg: &ShapConfig,
) -> Result<ShapAttribution> {
    model.check_layout()?;
    let pooled = model.predict(instance)?.pooled;
    let f = FrozenTemporal { model, pooled };
    let rows: Vec<Vec<f64>> = background.iter().map(|s| s.globals.to_vec()).collect();
    let est = shap_sampling(&f, &instance.globals, &rows, cfg)?;
    Ok(ShapAttribution {
        session_id: instance.session_id.clone(),
        feature_names: global_feature_names(),
        feature_values: instance.globals.to_vec(),
        values: est.values,
        std_errors: est.std_errors,
        base_value: est.base_value,
        prediction: est.prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg() -> Vec<Vec<f64>> {
        vec![vec![-1.0, 1.0, 0.5], vec![1.0, -1.0, -0.5], vec![0.0, 0.0, 0.0]]
    }

    #[test]
    fn constant_model_gets_zero() {
        let f = (3usize, |_: &[f64]| 4.2);
        let est = shap_sampling(&f, &[1.0, 2.0, 3.0], &bg(), &ShapConfig::default()).unwrap();
        assert!(est.values.iter().all(|v| *v == 0.0));
        assert_eq!(est.base_value, 4.2);
    }

    #[test]
    fn linear_model_closed_form() {
        let f = (2usize, |x: &[f64]| 2.0 * x[0] + 3.0 * x[1]);
        let background = vec![vec![0.0, 0.0]];
        let est = shap_sampling(&f, &[1.0, 1.0], &background, &ShapConfig { n_samples: 50, seed: 1 }).unwrap();
        assert!((est.values[0] - 2.0).abs() < 1e-12 && (est.values[1] - 3.0).abs() < 1e-12);
        assert!((est.values.iter().sum::<f64>() + est.base_value - est.prediction).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_interaction_closed_form() {
        // f = x0 * x1 with a single zero background: the product is split evenly.
        let f = (2usize, |x: &[f64]| x[0] * x[1]);
        let phi = exact_shapley(&f, &[2.0, 3.0], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(phi, vec![3.0, 3.0]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let f = (3usize, |x: &[f64]| x[0] * x[1] + x[2].sin());
        let cfg = ShapConfig { n_samples: 300, seed: 4 };
        let a = shap_sampling(&f, &[1.0, 2.0, 3.0], &bg(), &cfg).unwrap();
        let b = shap_sampling(&f, &[1.0, 2.0, 3.0], &bg(), &cfg).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| shap_sampling(&f, &[1.0, 2.0, 3.0], &bg(), &cfg).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn errors() {
        let f = (3usize, |_: &[f64]| 0.0);
        assert!(matches!(
            shap_sampling(&f, &[0.0; 3], &[], &ShapConfig::default()),
            Err(Error::Dataset(_))
        ));
        assert!(shap_sampling(&f, &[0.0; 2], &bg(), &ShapConfig::default()).is_err());
        assert!(shap_sampling(&f, &[0.0; 3], &bg(), &ShapConfig { n_samples: 0, seed: 0 }).is_err());
    }
}
