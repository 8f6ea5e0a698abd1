//! Video-level motion statistics computed from bounding-box centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{ObjectClass, SessionRecording};

pub const NUM_GLOBAL_FEATURES: usize = 19;

/// Objects whose motion is summarised. The simulator box is a fixture and is left out.
pub const MOVING_OBJECTS: [ObjectClass; 5] = [
    ObjectClass::LeftHand,
    ObjectClass::RightHand,
    ObjectClass::Forceps,
    ObjectClass::NeedleDriver,
    ObjectClass::Scissors,
];

pub const COMPLETION_TIME_INDEX: usize = 17;
pub const INTERHAND_CORRELATION_INDEX: usize = 18;

pub fn global_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(NUM_GLOBAL_FEATURES);
    for stat in ["still_ratio", "mean_speed", "mean_accel"] {
        for obj in MOVING_OBJECTS {
            names.push(format!("{stat}.{obj}"));
        }
    }
    names.push("out_of_frame_ratio.left_hand".into());
    names.push("out_of_frame_ratio.right_hand".into());
    names.push("completion_time".into());
    names.push("interhand_correlation".into());
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalFeatureConfig {
    /// Per-frame center displacement below which an object counts as still, as a fraction
    /// of the normalized frame diagonal.
    pub still_threshold: f64,
}

impl Default for GlobalFeatureConfig {
    fn default() -> Self {
        Self {
            still_threshold: 0.002,
        }
    }
}

impl GlobalFeatureConfig {
    /// Threshold in normalized frame units; the normalized frame is the unit square.
    pub fn eps(&self) -> f64 {
        self.still_threshold * std::f64::consts::SQRT_2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeatureVector {
    pub values: [f64; NUM_GLOBAL_FEATURES],
}

impl GlobalFeatureVector {
    pub fn names(&self) -> Vec<String> {
        global_feature_names()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        global_feature_names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

pub type Center = Option<[f64; 2]>;

pub fn box_centers(s: &SessionRecording, class: ObjectClass) -> Vec<Center> {
    s.frames.iter().map(|f| f.bbox(class).map(|b| b.center())).collect()
}

fn displacement(a: Center, b: Center) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some((b[0] - a[0]).hypot(b[1] - a[1])),
        _ => None,
    }
}

/// Fraction of transitions with both endpoints detected in which the center moves less than
/// `eps`. Transitions with a missing endpoint are excluded from numerator and denominator,
/// so trailing undetected frames leave the ratio unchanged. Returns 0 when no transition
/// has both endpoints.
pub fn still_ratio(centers: &[Center], eps: f64) -> Result<f64> {
    if centers.len() < 2 {
        return Err(Error::Statistic {
            statistic: "still_ratio".into(),
            message: format!("needs at least 2 frames, got {}", centers.len()),
        });
    }
    let (mut still, mut valid) = (0usize, 0usize);
    for w in centers.windows(2) {
        if let Some(d) = displacement(w[0], w[1]) {
            valid += 1;
            if d < eps {
                still += 1;
            }
        }
    }
    Ok(if valid == 0 {
        0.0
    } else {
        still as f64 / valid as f64
    })
}

/// Per-transition motion of one box center. `None` marks transitions touching an
/// undetected frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSeries {
    /// Center displacement per transition, frame-fraction units (length T-1).
    pub displacement: Vec<Option<f64>>,
    /// Displacement / frame interval (length T-1).
    pub speed: Vec<Option<f64>>,
    /// |speed difference| / frame interval (length T-2).
    pub accel: Vec<Option<f64>>,
}

impl MotionSeries {
    pub fn from_centers(centers: &[Center], fps: f64) -> Self {
        let displacement: Vec<_> = centers.windows(2).map(|w| displacement(w[0], w[1])).collect();
        Self::from_displacement(displacement, fps)
    }

    pub fn from_displacement(displacement: Vec<Option<f64>>, fps: f64) -> Self {
        let speed: Vec<_> = displacement.iter().map(|d| d.map(|d| d * fps)).collect();
        let accel = speed
            .windows(2)
            .map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => Some((b - a).abs() * fps),
                _ => None,
            })
            .collect();
        Self {
            displacement,
            speed,
            accel,
        }
    }

    fn moving(&self, k: usize, eps: f64) -> bool {
        self.displacement[k].is_some_and(|d| d >= eps)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean speed over transitions whose displacement is at least `eps`; 0 if there are none.
pub fn mean_speed_nonidle(series: &MotionSeries, eps: f64) -> f64 {
    mean(
        (0..series.speed.len())
            .filter(|&k| series.moving(k, eps))
            .filter_map(|k| series.speed[k]),
    )
}

/// Mean acceleration magnitude over consecutive transition pairs that are both non-idle.
pub fn mean_accel_nonidle(series: &MotionSeries, eps: f64) -> f64 {
    mean(
        (0..series.accel.len())
            .filter(|&k| series.moving(k, eps) && series.moving(k + 1, eps))
            .filter_map(|k| series.accel[k]),
    )
}

pub fn out_of_frame_ratio(detected: &[bool]) -> f64 {
    if detected.is_empty() {
        return 0.0;
    }
    detected.iter().filter(|d| !**d).count() as f64 / detected.len() as f64
}

pub fn completion_time(s: &SessionRecording) -> f64 {
    s.frames.len() as f64 / s.fps
}

/// Lag-0 Pearson correlation over transitions where both hands have a speed. Returns 0 for
/// fewer than two paired samples or a constant series.
pub fn interhand_correlation(left: &[Option<f64>], right: &[Option<f64>]) -> f64 {
    let pairs: Vec<(f64, f64)> = left
        .iter()
        .zip(right)
        .filter_map(|(l, r)| Some(((*l)?, (*r)?)))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let ml = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mr = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (l, r) in &pairs {
        sxy += (l - ml) * (r - mr);
        sxx += (l - ml).powi(2);
        syy += (r - mr).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

pub fn build_global_vector(
    s: &SessionRecording,
    cfg: &GlobalFeatureConfig,
) -> Result<GlobalFeatureVector> {
    let eps = cfg.eps();
    let mut values = [0.0; NUM_GLOBAL_FEATURES];
    let mut hand_speeds = Vec::with_capacity(2);
    for (i, obj) in MOVING_OBJECTS.into_iter().enumerate() {
        let centers = box_centers(s, obj);
        values[i] = still_ratio(&centers, eps).map_err(|e| match e {
            Error::Statistic { message, .. } => Error::Statistic {
                statistic: format!("still_ratio.{obj}"),
                message: format!("session {}: {message}", s.session_id),
            },
            other => other,
        })?;
        let series = MotionSeries::from_centers(&centers, s.fps);
        values[5 + i] = mean_speed_nonidle(&series, eps);
        values[10 + i] = mean_accel_nonidle(&series, eps);
        if i < 2 {
            hand_speeds.push(series.speed);
        }
    }
    for (k, hand) in [ObjectClass::LeftHand, ObjectClass::RightHand].into_iter().enumerate() {
        let detected: Vec<bool> = s.frames.iter().map(|f| f.bbox(hand).is_some()).collect();
        values[15 + k] = out_of_frame_ratio(&detected);
    }
    values[COMPLETION_TIME_INDEX] = completion_time(s);
    values[INTERHAND_CORRELATION_INDEX] = interhand_correlation(&hand_speeds[0], &hand_speeds[1]);
    Ok(GlobalFeatureVector { values })
}
