//! The full scorer: backbone, attention pooling, fusion head, plus the normalization
//! statistics and preprocessing settings it was trained with.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    importance_from_attention, score_from_logits, AttentionConfig, AttentionPool, FusionConfig,
    FusionHead,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::frame::{build_feature_matrix, channel_layout, PreprocessConfig, NUM_CHANNELS};
use crate::globals::{build_global_vector, global_feature_names, GlobalFeatureConfig, NUM_GLOBAL_FEATURES};
use crate::params::{
    read_container, sha256_hex, write_container, FanInUniform, FromLoaded, ParamInit, ParamStore,
};
use crate::session::SessionRecording;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub fusion: FusionConfig,
    /// Standardize each frame channel with training-set statistics before the backbone.
    pub standardize_frames: bool,
}

/// Per-coordinate `(x - mean) / std`; a zero spread is replaced by 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&[f64]> = rows.collect();
        for r in &rows {
            n += 1;
            for (s, v) in sum.iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &rows {
            for ((q, v), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
                *q += (v - m).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|q| {
                let s = (q / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Fingerprint of the frame-channel and global-feature layouts.
pub fn layout_hash() -> String {
    let mut text = channel_layout().join("\n");
    text.push_str("\n--\n");
    text.push_str(&global_feature_names().join("\n"));
    sha256_hex(text.as_bytes())
}

/// A session reduced to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSession {
    pub session_id: String,
    pub fps: f64,
    /// Raw `[150, T]` frame features.
    pub features: Tensor,
    pub globals: [f64; NUM_GLOBAL_FEATURES],
    pub score: Option<i32>,
}

impl PreparedSession {
    pub fn frames(&self) -> usize {
        self.features.dims2().1
    }
}

pub fn prepare_session(
    s: &SessionRecording,
    pre: &PreprocessConfig,
    glob: &GlobalFeatureConfig,
) -> Result<PreparedSession> {
    let m = build_feature_matrix(s, pre)?;
    let frames = m.frames();
    let g = build_global_vector(s, glob)?;
    Ok(PreparedSession {
        session_id: s.session_id.clone(),
        fps: s.fps,
        features: Tensor::matrix(NUM_CHANNELS, frames, m.into_data())?,
        globals: g.values,
        score: s.expert_score,
    })
}

pub fn prepare_all(
    sessions: &[SessionRecording],
    pre: &PreprocessConfig,
    glob: &GlobalFeatureConfig,
) -> Result<Vec<PreparedSession>> {
    use rayon::prelude::*;
    sessions
        .par_iter()
        .map(|s| prepare_session(s, pre, glob))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    preprocess: PreprocessConfig,
    globals: GlobalFeatureConfig,
    global_norm: Standardizer,
    frame_norm: Standardizer,
    layout_hash: String,
}

/// Result of scoring one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub logits: Vec<f64>,
    pub importance: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub attention: Var,
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct SkillModel {
    pub config: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub globals: GlobalFeatureConfig,
    pub global_norm: Standardizer,
    pub frame_norm: Standardizer,
    pub layout_hash: String,
    pub store: ParamStore,
    backbone: Backbone,
    attention: AttentionPool,
    fusion: FusionHead,
}

impl SkillModel {
    fn build(config: &ModelConfig, init: &mut dyn ParamInit) -> Result<(ParamStore, Backbone, AttentionPool, FusionHead)> {
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, init, &config.backbone)?;
        let f = config.backbone.hidden_dim;
        let attention = AttentionPool::register(&mut store, init, &config.attention, f)?;
        let fusion = FusionHead::register(&mut store, init, &config.fusion, f)?;
        Ok((store, backbone, attention, fusion))
    }

    /// Freshly initialized model with identity normalization.
    pub fn init<R: Rng>(
        config: &ModelConfig,
        preprocess: &PreprocessConfig,
        globals: &GlobalFeatureConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(config, preprocess, globals, &mut FanInUniform(rng))
    }

    pub fn with_init(
        config: &ModelConfig,
        preprocess: &PreprocessConfig,
        globals: &GlobalFeatureConfig,
        init: &mut dyn ParamInit,
    ) -> Result<Self> {
        if config.backbone.input_dim != NUM_CHANNELS {
            return Err(Error::Config(format!(
                "backbone input_dim must be {NUM_CHANNELS} for session features"
            )));
        }
        let (store, backbone, attention, fusion) = Self::build(config, init)?;
        Ok(Self {
            config: config.clone(),
            preprocess: preprocess.clone(),
            globals: globals.clone(),
            global_norm: Standardizer::identity(NUM_GLOBAL_FEATURES),
            frame_norm: Standardizer::identity(NUM_CHANNELS),
            layout_hash: layout_hash(),
            store,
            backbone,
            attention,
            fusion,
        })
    }

    /// Sets normalization statistics from training sessions.
    pub fn fit_normalization(&mut self, train: &[PreparedSession]) {
        self.global_norm =
            Standardizer::fit(NUM_GLOBAL_FEATURES, train.iter().map(|s| &s.globals[..]));
        self.frame_norm = if self.config.standardize_frames {
            let mut sum = vec![0.0; NUM_CHANNELS];
            let mut sq = vec![0.0; NUM_CHANNELS];
            let mut n = 0.0;
            for s in train {
                let (_, t) = s.features.dims2();
                n += t as f64;
                for c in 0..NUM_CHANNELS {
                    let row = &s.features.data()[c * t..(c + 1) * t];
                    sum[c] += row.iter().sum::<f64>();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1.0)).collect();
            for s in train {
                let (_, t) = s.features.dims2();
                for c in 0..NUM_CHANNELS {
                    let row = &s.features.data()[c * t..(c + 1) * t];
                    sq[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            let std = sq
                .iter()
                .map(|q| {
                    let s = (q / n.max(1.0)).sqrt();
                    if s > 1e-12 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            Standardizer { mean, std }
        } else {
            Standardizer::identity(NUM_CHANNELS)
        };
    }

    pub fn normalize_frames(&self, features: &Tensor) -> Result<Tensor> {
        let (c, t) = features.dims2();
        if c != NUM_CHANNELS {
            return Err(Error::shape(
                "model input",
                format!("{c} channels, expected {NUM_CHANNELS}"),
            ));
        }
        let mut data = features.data().to_vec();
        for ch in 0..c {
            let (m, s) = (self.frame_norm.mean[ch], self.frame_norm.std[ch]);
            for v in &mut data[ch * t..(ch + 1) * t] {
                *v = (*v - m) / s;
            }
        }
        Tensor::matrix(c, t, data)
    }

    pub fn normalize_globals(&self, raw: &[f64]) -> Vec<f64> {
        self.global_norm.apply(raw)
    }

    /// Forward pass on already-normalized inputs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        frames: Var,
        globals: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let h = self.backbone.forward(tape, vars, frames, train, rng)?;
        let pool = self.attention.forward(tape, vars, h)?;
        let logits = self
            .fusion
            .forward(tape, vars, pool.pooled, globals, train, rng)?;
        Ok(ForwardVars {
            logits,
            attention: pool.attention,
            pooled: pool.pooled,
        })
    }

    /// Eval-mode prediction for one prepared session.
    pub fn predict(&self, s: &PreparedSession) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let x = tape.constant(self.normalize_frames(&s.features)?);
        let g = tape.constant(Tensor::vector(self.normalize_globals(&s.globals)));
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, &vars, x, g, false, &mut rng)?;
        let logits = tape.value(out.logits).data().to_vec();
        Ok(Prediction {
            score: score_from_logits(&logits),
            importance: importance_from_attention(tape.value(out.attention)),
            pooled: tape.value(out.pooled).data().to_vec(),
            logits,
        })
    }

    /// Score with the temporal branch fixed to `pooled` and raw global features `raw_globals`.
    pub fn score_with_pooled(&self, pooled: &[f64], raw_globals: &[f64]) -> Result<f64> {
        let g = self.normalize_globals(raw_globals);
        let logits = self.fusion.eval(&self.store, pooled, &g)?;
        Ok(score_from_logits(&logits))
    }

    pub fn check_layout(&self) -> Result<()> {
        let current = layout_hash();
        if self.layout_hash != current {
            return Err(Error::Layout(format!(
                "model was trained with layout {}, this build uses {current}",
                self.layout_hash
            )));
        }
        Ok(())
    }

    fn header(&self) -> Header {
        Header {
            format: "skillscope-model-1".into(),
            config: self.config.clone(),
            preprocess: self.preprocess.clone(),
            globals: self.globals.clone(),
            global_norm: self.global_norm.clone(),
            frame_norm: self.frame_norm.clone(),
            layout_hash: self.layout_hash.clone(),
        }
    }

    /// SHA-256 of the serialized architecture and preprocessing settings.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(&self.header())?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_value(self.header())?;
        write_container(path.as_ref(), &header, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, tensors) = read_container(path.as_ref())?;
        let header: Header = serde_json::from_value(header)
            .map_err(|e| Error::Container(format!("bad header: {e}")))?;
        let mut source = FromLoaded(tensors.into_iter().collect());
        let (store, backbone, attention, fusion) = Self::build(&header.config, &mut source)?;
        if let Some(extra) = source.0.keys().next() {
            return Err(Error::Container(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config: header.config,
            preprocess: header.preprocess,
            globals: header.globals,
            global_norm: header.global_norm,
            frame_norm: header.frame_norm,
            layout_hash: header.layout_hash,
            store,
            backbone,
            attention,
            fusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::minimal_session;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                hidden_dim: 4,
                num_layers: 2,
                dropout: 0.0,
                ..Default::default()
            },
            attention: AttentionConfig { heads: 2, head_dim: None },
            fusion: FusionConfig { hidden: vec![5], ..Default::default() },
            standardize_frames: true,
        }
    }

    #[test]
    fn save_load_round_trip_predicts_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = PreprocessConfig::default();
        let glob = GlobalFeatureConfig::default();
        let mut model = SkillModel::init(&tiny_config(), &pre, &glob, &mut rng).unwrap();
        let s = prepare_session(&minimal_session("a", 12), &pre, &glob).unwrap();
        model.fit_normalization(std::slice::from_ref(&s));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let loaded = SkillModel::load(&path).unwrap();
        assert_eq!(loaded.store, model.store);
        assert_eq!(loaded.predict(&s).unwrap(), model.predict(&s).unwrap());
        assert_eq!(loaded.config_hash().unwrap(), model.config_hash().unwrap());
        loaded.check_layout().unwrap();
    }

    #[test]
    fn layout_mismatch_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = SkillModel::init(
            &tiny_config(),
            &PreprocessConfig::default(),
            &GlobalFeatureConfig::default(),
            &mut rng,
        )
        .unwrap();
        model.layout_hash = "0000".into();
        assert!(matches!(model.check_layout(), Err(Error::Layout(_))));
    }

    #[test]
    fn pooled_path_matches_full_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pre = PreprocessConfig::default();
        let glob = GlobalFeatureConfig::default();
        let model = SkillModel::init(&tiny_config(), &pre, &glob, &mut rng).unwrap();
        let s = prepare_session(&minimal_session("a", 10), &pre, &glob).unwrap();
        let p = model.predict(&s).unwrap();
        let via_pooled = model.score_with_pooled(&p.pooled, &s.globals).unwrap();
        assert!((p.score - via_pooled).abs() < 1e-12);
        assert!((p.importance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn standardizer_fit() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(2, rows.iter().map(|r| &r[..]));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 6.0]), vec![1.0, 1.0]);
    }
}
