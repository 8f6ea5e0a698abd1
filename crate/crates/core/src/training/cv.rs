//! Seeded 70/30 split and grid search with k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_prepared, EvalReport, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::frame::PreprocessConfig;
use crate::globals::GlobalFeatureConfig;
use crate::model::{ModelConfig, PreparedSession, SkillModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Candidate values; the grid is their cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchGrid {
    pub hidden_dim: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub lr: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            hidden_dim: vec![64],
            num_layers: vec![10],
            heads: vec![4],
            lr: vec![1e-3],
            alpha: vec![1.0],
            dropout: vec![0.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub alpha: f64,
    pub dropout: f64,
}

impl GridPoint {
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        m.backbone.hidden_dim = self.hidden_dim;
        m.backbone.num_layers = self.num_layers;
        m.backbone.dropout = self.dropout;
        m.attention.heads = self.heads;
        let mut t = train.clone();
        t.adam.lr = self.lr;
        t.sord.alpha = self.alpha;
        (m, t)
    }
}

impl SearchGrid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &hidden_dim in &self.hidden_dim {
            for &num_layers in &self.num_layers {
                for &heads in &self.heads {
                    for &lr in &self.lr {
                        for &alpha in &self.alpha {
                            for &dropout in &self.dropout {
                                out.push(GridPoint {
                                    hidden_dim,
                                    num_layers,
                                    heads,
                                    lr,
                                    alpha,
                                    dropout,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Validation folds, as indices into the full session list.
    pub folds: Vec<Vec<usize>>,
}

/// Test size is `floor(n * test_fraction)`; folds are contiguous chunks of the shuffled
/// training portion, the first `n_train % folds` of them one larger.
pub fn make_split(n: usize, cfg: &CvConfig) -> Result<Split> {
    if cfg.folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} not in [0, 1)",
            cfg.test_fraction
        )));
    }
    let n_test = (n as f64 * cfg.test_fraction).floor() as usize;
    let n_train = n - n_test;
    if n < 8 || n_train < cfg.folds {
        return Err(Error::Dataset(format!(
            "{n} sessions are too few for a held-out split and {} folds",
            cfg.folds
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    let (base, extra) = (n_train / cfg.folds, n_train % cfg.folds);
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut at = 0;
    for f in 0..cfg.folds {
        let len = base + usize::from(f < extra);
        folds.push(train[at..at + len].to_vec());
        at += len;
    }
    Ok(Split { train, test, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub fold_r: Vec<f64>,
    pub mean_r: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub split: Split,
    pub grid: Vec<GridResult>,
    pub best: GridPoint,
    pub model: SkillModel,
    pub log: TrainLog,
    pub test_report: EvalReport,
}

fn pick<T: Clone>(data: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Grid search by mean validation Pearson r, retrain the winner on the whole training
/// portion, and report on the held-out test sessions.
pub fn split_and_cv(
    data: &[PreparedSession],
    model_cfg: &ModelConfig,
    pre: &PreprocessConfig,
    glob: &GlobalFeatureConfig,
    train_cfg: &TrainConfig,
    grid: &SearchGrid,
    cv: &CvConfig,
) -> Result<CvOutcome> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("search grid is empty".into()));
    }
    let split = make_split(data.len(), cv)?;
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..split.folds.len()).map(move |f| (p, f)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, f)| {
            let (m, t) = points[p].apply(model_cfg, train_cfg);
            let val = &split.folds[f];
            let fit_idx: Vec<usize> = split
                .train
                .iter()
                .copied()
                .filter(|i| !val.contains(i))
                .collect();
            let (model, _) = train_prepared(&pick(data, &fit_idx), &m, pre, glob, &t)?;
            let report = evaluate(&model, &pick(data, val))?;
            log::info!(
                "grid point {p} fold {f}: validation r {:.4}",
                report.pearson_r
            );
            Ok(report.pearson_r)
        })
        .collect::<Result<Vec<_>>>()?;

    let k = split.folds.len();
    let results: Vec<GridResult> = points
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let fold_r = scores[p * k..(p + 1) * k].to_vec();
            let mean_r = fold_r.iter().sum::<f64>() / k as f64;
            GridResult { point: *point, fold_r, mean_r }
        })
        .collect();
    let best = results
        .iter()
        .fold(None::<&GridResult>, |acc, r| match acc {
            Some(b) if b.mean_r >= r.mean_r || r.mean_r.is_nan() => Some(b),
            _ => Some(r),
        })
        .expect("grid is non-empty")
        .point;

    let (m, t) = best.apply(model_cfg, train_cfg);
    let (model, log) = train_prepared(&pick(data, &split.train), &m, pre, glob, &t)?;
    let test_report = evaluate(&model, &pick(data, &split.test))?;
    Ok(CvOutcome {
        split,
        grid: results,
        best,
        model,
        log,
        test_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_sessions_leave_three_for_test() {
        let s = make_split(10, &CvConfig::default()).unwrap();
        assert_eq!(s.test.len(), 3);
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 2, 1]);
        let s = make_split(200, &CvConfig::default()).unwrap();
        assert_eq!(s.test.len(), 60);
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let cfg = CvConfig { seed: 9, ..Default::default() };
        let a = make_split(37, &cfg).unwrap();
        assert_eq!(a, make_split(37, &cfg).unwrap());
        let mut all: Vec<usize> = a.test.iter().chain(a.folds.iter().flatten()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert_ne!(a, make_split(37, &CvConfig { seed: 10, ..Default::default() }).unwrap());
    }

    #[test]
    fn too_few_sessions_rejected() {
        assert!(make_split(7, &CvConfig::default()).is_err());
        assert_eq!(make_split(8, &CvConfig::default()).unwrap().train.len(), 6);
        assert!(make_split(8, &CvConfig { folds: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let g = SearchGrid {
            hidden_dim: vec![4, 8],
            lr: vec![0.0, 1e-3, 1e-2],
            ..Default::default()
        };
        assert_eq!(g.points().len(), 6);
        assert!(SearchGrid { heads: vec![], ..Default::default() }.points().is_empty());
    }
}
