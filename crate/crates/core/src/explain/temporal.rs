use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prepare_session, SkillModel};
use crate::session::SessionRecording;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub top_k: usize,
    /// Runs separated by fewer than this many frames are merged.
    pub merge_gap: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self { top_k: 3, merge_gap: 5 }
    }
}

/// Frames `[start, end)` and the importance mass they carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub session_id: String,
    pub predicted_score: f64,
    pub importance: Vec<f64>,
    pub segments: Vec<Segment>,
}

/// Runs of frames weighted above the uniform level `1/T`, merged across short gaps and
/// ranked by mass. A uniform map yields no segments.
pub fn segments_from_importance(importance: &[f64], cfg: &TemporalConfig) -> Vec<Segment> {
    let t = importance.len();
    if t == 0 {
        return Vec::new();
    }
    let level = 1.0 / t as f64 * (1.0 + 1e-9);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < t {
        if importance[i] > level {
            let start = i;
            while i < t && importance[i] > level {
                i += 1;
            }
            match runs.last_mut() {
                Some(last) if start - last.1 < cfg.merge_gap => last.1 = i,
                _ => runs.push((start, i)),
            }
        } else {
            i += 1;
        }
    }
    let mut segs: Vec<Segment> = runs
        .into_iter()
        .map(|(start, end)| Segment {
            start,
            end,
            mass: importance[start..end].iter().sum(),
        })
        .collect();
    segs.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.start.cmp(&b.start)));
    segs.truncate(cfg.top_k);
    segs
}

pub fn temporal_report(
    s: &SessionRecording,
    model: &SkillModel,
    cfg: &TemporalConfig,
) -> Result<TemporalReport> {
    model.check_layout()?;
    let violations = crate::session::validate_session(s);
    if let Some(v) = violations.first() {
        return Err(Error::Validation {
            session_id: s.session_id.clone(),
            field: v.field.clone(),
            message: format!("{}: {}", v.kind, v.detail),
        });
    }
    let prepared = prepare_session(s, &model.preprocess, &model.globals)?;
    let p = model.predict(&prepared)?;
    Ok(TemporalReport {
        session_id: s.session_id.clone(),
        predicted_score: p.score,
        segments: segments_from_importance(&p.importance, cfg),
        importance: p.importance,
    })
}
