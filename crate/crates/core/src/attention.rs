//! Multi-head attention pooling with one learned query per head, fusion with the global
//! statistics, and decoding of the 10 ordinal logits into a score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::globals::NUM_GLOBAL_FEATURES;
use crate::params::{ParamId, ParamInit, ParamStore};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Defaults to `hidden_dim / heads` (at least 1).
    pub head_dim: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: None,
        }
    }
}

impl AttentionConfig {
    pub fn resolved_head_dim(&self, hidden_dim: usize) -> usize {
        self.head_dim
            .unwrap_or((hidden_dim / self.heads.max(1)).max(1))
    }
}

/// Registered attention-pooling parameters.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    heads: usize,
    head_dim: usize,
    hidden_dim: usize,
    query: ParamId,
    key_w: ParamId,
    key_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Pooled vector and per-head attention distributions (`[heads, T]`) on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PoolOutput {
    pub pooled: Var,
    pub attention: Var,
}

impl AttentionPool {
    pub fn register(
        store: &mut ParamStore,
        init: &mut dyn ParamInit,
        cfg: &AttentionConfig,
        hidden_dim: usize,
    ) -> Result<Self> {
        if cfg.heads == 0 || hidden_dim == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        let heads = cfg.heads;
        let head_dim = cfg.resolved_head_dim(hidden_dim);
        let inner = heads * head_dim;
        let mut add = |name: &str, shape: &[usize], fan_in: Option<usize>| -> Result<ParamId> {
            let full = format!("attention.{name}");
            let t = init.tensor(&full, shape, fan_in)?;
            Ok(store.add(full, t))
        };
        Ok(Self {
            heads,
            head_dim,
            hidden_dim,
            query: add("query", &[heads, head_dim], Some(head_dim))?,
            key_w: add("key.w", &[inner, hidden_dim, 1], Some(hidden_dim))?,
            key_b: add("key.b", &[inner], None)?,
            value_w: add("value.w", &[inner, hidden_dim, 1], Some(hidden_dim))?,
            value_b: add("value.b", &[inner], None)?,
            out_w: add("out.w", &[hidden_dim, inner], Some(inner))?,
            out_b: add("out.b", &[hidden_dim], None)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// `h` is the `[F, T]` hidden sequence. Per head, frame scores are
    /// `q . k_t / sqrt(head_dim)`, softmaxed over frames and used to average the values.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Result<PoolOutput> {
        let (f, t) = tape.value(h).dims2();
        if f != self.hidden_dim || t == 0 {
            return Err(Error::shape(
                "attention_pool",
                format!("hidden sequence [{f}, {t}], expected {} channels", self.hidden_dim),
            ));
        }
        let v = |id: ParamId| vars[id.index()];
        let keys = tape.pointwise_conv(h, v(self.key_w), Some(v(self.key_b)))?;
        let values = tape.pointwise_conv(h, v(self.value_w), Some(v(self.value_b)))?;
        let inv_sqrt = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.slice_rows(v(self.query), head, 1)?;
            let k = tape.slice_rows(keys, head * self.head_dim, self.head_dim)?;
            let s = tape.matmul(q, k)?;
            scores.push(tape.scale(s, inv_sqrt));
        }
        let scores = tape.concat(&scores)?;
        let attention = tape.softmax(scores, 1)?;
        let mut pooled_heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let a = tape.slice_rows(attention, head, 1)?;
            let vals = tape.slice_rows(values, head * self.head_dim, self.head_dim)?;
            pooled_heads.push(tape.weighted_sum(vals, a)?);
        }
        let cat = tape.concat(&pooled_heads)?;
        let pooled = tape.linear(cat, v(self.out_w), Some(v(self.out_b)))?;
        Ok(PoolOutput { pooled, attention })
    }
}

/// Frame-level importance: mean over heads of the attention distributions.
pub fn importance_from_attention(attention: &crate::autodiff::Tensor) -> Vec<f64> {
    let (heads, t) = attention.dims2();
    let d = attention.data();
    (0..t)
        .map(|i| (0..heads).map(|h| d[h * t + i]).sum::<f64>() / heads as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Training-time probability of replacing the whole standardized global vector by
    /// zeros (its training mean) for one sample.
    pub global_dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            dropout: 0.0,
            global_dropout: 0.0,
        }
    }
}

/// MLP over `[pooled ‖ standardized globals]` producing 10 logits.
#[derive(Debug, Clone)]
pub struct FusionHead {
    layers: Vec<(ParamId, ParamId)>,
    input_dim: usize,
    dropout: f64,
    global_dropout: f64,
}

impl FusionHead {
    pub fn register(
        store: &mut ParamStore,
        init: &mut dyn ParamInit,
        cfg: &FusionConfig,
        pooled_dim: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout)
            || !(0.0..1.0).contains(&cfg.global_dropout)
            || cfg.hidden.contains(&0)
        {
            return Err(Error::Config(
                "fusion layers must be non-empty, dropout rates in [0, 1)".into(),
            ));
        }
        let input_dim = pooled_dim + NUM_GLOBAL_FEATURES;
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(NUM_CLASSES);
        let mut layers = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let wn = format!("fusion.layer{l}.w");
            let bn = format!("fusion.layer{l}.b");
            let w = init.tensor(&wn, &[out, inp], Some(inp))?;
            let b = init.tensor(&bn, &[out], None)?;
            layers.push((store.add(wn, w), store.add(bn, b)));
        }
        Ok(Self {
            layers,
            input_dim,
            dropout: cfg.dropout,
            global_dropout: cfg.global_dropout,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        pooled: Var,
        globals: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let globals = if train && self.global_dropout > 0.0 && rng.random_bool(self.global_dropout) {
            let n = tape.value(globals).len();
            tape.constant(Tensor::zeros(&[n]))
        } else {
            globals
        };
        let mut x = tape.concat(&[pooled, globals])?;
        if tape.value(x).len() != self.input_dim {
            return Err(Error::shape(
                "fuse_predict",
                format!("{} fused inputs, expected {}", tape.value(x).len(), self.input_dim),
            ));
        }
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            x = tape.linear(x, vars[w.index()], Some(vars[b.index()]))?;
            if l < last {
                x = tape.relu(x);
                x = tape.dropout(x, self.dropout, train, rng)?;
            }
        }
        Ok(x)
    }

    /// Eval-mode logits without a tape; used for the many evaluations of Shapley sampling.
    pub fn eval(&self, store: &ParamStore, pooled: &[f64], globals: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() + globals.len() != self.input_dim {
            return Err(Error::shape(
                "fuse_predict",
                format!("{} fused inputs, expected {}", pooled.len() + globals.len(), self.input_dim),
            ));
        }
        let mut x: Vec<f64> = pooled.iter().chain(globals).copied().collect();
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let w = store.get(*w);
            let (out, inp) = w.dims2();
            let wd = w.data();
            let mut y = store.get(*b).data().to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += wd[o * inp..(o + 1) * inp].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                if l < last {
                    *yo = yo.max(0.0);
                }
            }
            debug_assert_eq!(y.len(), out);
            x = y;
        }
        Ok(x)
    }
}

/// Expected class `sum_k k * softmax(logits)_k` over classes `1..=10`.
pub fn score_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(k, e)| (k + 1) as f64 * e / z)
        .sum()
}
