//! Ordinal loss, the per-sample training loop, model selection, and metrics.

pub mod cv;
pub mod metrics;
pub mod sord;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::frame::PreprocessConfig;
use crate::globals::GlobalFeatureConfig;
use crate::model::{prepare_all, ModelConfig, PreparedSession, SkillModel};
use crate::session::SessionRecording;

pub use cv::{make_split, split_and_cv, CvConfig, CvOutcome, GridPoint, GridResult, SearchGrid, Split};
pub use metrics::{evaluate_predictions, metrics, pearson, EvalReport, SessionPrediction};
pub use sord::{sord_loss, sord_targets, sord_targets_k, Distance, SordConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Samples per optimizer step; gradients are averaged over them.
    pub accumulate: usize,
    pub sord: SordConfig,
    /// Rescale the averaged gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            adam: AdamConfig::default(),
            seed: 0,
            accumulate: 1,
            sord: SordConfig::default(),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sord.validate()?;
        if self.accumulate == 0 {
            return Err(Error::Config("accumulate must be at least 1".into()));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} invalid", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

/// Seed for the parameter initializer of a run.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Streams for sample order and dropout masks; distinct from the initializer stream.
fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut order = ChaCha8Rng::seed_from_u64(seed);
    order.set_stream(1);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(2);
    (order, dropout)
}

fn labels_of(data: &[PreparedSession]) -> Result<Vec<i32>> {
    data.iter()
        .map(|s| {
            s.score.ok_or_else(|| {
                Error::Dataset(format!("session {} has no expert score", s.session_id))
            })
        })
        .collect()
}

/// Fits normalization statistics, then runs `cfg.epochs` epochs of per-sample Adam.
pub fn fit(model: &mut SkillModel, data: &[PreparedSession], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training sessions".into()));
    }
    let labels = labels_of(data)?;
    model.fit_normalization(data);
    let inputs = data
        .iter()
        .zip(&labels)
        .map(|(s, &y)| {
            Ok((
                model.normalize_frames(&s.features)?,
                Tensor::vector(model.normalize_globals(&s.globals)),
                sord_targets(y, &cfg.sord)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let (mut order_rng, mut dropout_rng) = run_rngs(cfg.seed);
    let mut state = AdamState::new(cfg.adam, &model.store.tensors().iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.accumulate) {
            let mut acc: Vec<Tensor> = model
                .store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &i in chunk {
                let (x, g, t) = &inputs[i];
                let mut tape = Tape::new();
                let vars = model.store.bind(&mut tape, true);
                let xv = tape.constant(x.clone());
                let gv = tape.constant(g.clone());
                let out = model.forward(&mut tape, &vars, xv, gv, true, &mut dropout_rng)?;
                let loss = tape.soft_cross_entropy(out.logits, t)?;
                total += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(&vars) {
                    if let Some(gr) = grads.get(*v) {
                        a.add_assign(gr);
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut sq = 0.0;
            for a in &mut acc {
                for v in a.data_mut() {
                    *v *= inv;
                    sq += *v * *v;
                }
            }
            if let Some(max) = cfg.clip_norm {
                let norm = sq.sqrt();
                if norm > max {
                    let s = max / norm;
                    acc.iter_mut()
                        .for_each(|a| a.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            let grads: Vec<&Tensor> = acc.iter().collect();
            let mut params: Vec<&mut Tensor> = model.store.tensors_mut().iter_mut().collect();
            adam_step(&mut params, &grads, &mut state)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Statistic {
                statistic: "training loss".into(),
                message: format!("non-finite loss at epoch {epoch}"),
            });
        }
        log::info!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainLog { seed: cfg.seed, epoch_losses })
}

/// Initializes a model from `cfg.seed` and fits it on prepared sessions.
pub fn train_prepared(
    data: &[PreparedSession],
    model_cfg: &ModelConfig,
    pre: &PreprocessConfig,
    glob: &GlobalFeatureConfig,
    cfg: &TrainConfig,
) -> Result<(SkillModel, TrainLog)> {
    let mut model = SkillModel::init(model_cfg, pre, glob, &mut init_rng(cfg.seed))?;
    let log = fit(&mut model, data, cfg)?;
    Ok((model, log))
}

/// Validates labels and simulator uniformity, extracts features, and trains.
pub fn train(
    sessions: &[SessionRecording],
    model_cfg: &ModelConfig,
    pre: &PreprocessConfig,
    glob: &GlobalFeatureConfig,
    cfg: &TrainConfig,
) -> Result<(SkillModel, TrainLog)> {
    check_training_sessions(sessions)?;
    let data = prepare_all(sessions, pre, glob)?;
    train_prepared(&data, model_cfg, pre, glob, cfg)
}

pub fn check_training_sessions(sessions: &[SessionRecording]) -> Result<()> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::Dataset("no training sessions".into()))?;
    for s in sessions {
        if s.expert_score.is_none() {
            return Err(Error::Dataset(format!(
                "session {} has no expert score",
                s.session_id
            )));
        }
        if s.simulator != first.simulator {
            return Err(Error::Dataset(format!(
                "mixed simulators: {} is {}, {} is {}",
                first.session_id,
                first.simulator.name(),
                s.session_id,
                s.simulator.name()
            )));
        }
    }
    Ok(())
}

/// Eval-mode predictions against labels.
pub fn evaluate(model: &SkillModel, data: &[PreparedSession]) -> Result<EvalReport> {
    let labels = labels_of(data)?;
    let rows = data
        .iter()
        .zip(labels)
        .map(|(s, y)| {
            Ok(SessionPrediction {
                session_id: s.session_id.clone(),
                predicted: model.predict(s)?.score,
                label: y as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(rows)
}
