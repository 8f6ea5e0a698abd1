//! Seeded generator of skill-graded sessions with planted, recoverable signals.
//!
//! Each session draws an expert score uniformly from 1..=10. Higher scores get shorter
//! durations and smaller hand-acceleration noise. A finger tremor whose amplitude falls
//! with the score is added to both hands inside a fixed event window. Wrist trajectories
//! are smooth sums of sinusoids; boxes come from the projected keypoint extents.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::session::{
    session_to_json_line, BoundingBox, Dataset, FrameObservation, HandPose, ObjectClass,
    SessionRecording, SimulatorKind, KEYPOINTS_PER_HAND, MAX_SCORE, MIN_SCORE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_sessions: usize,
    pub fps: f64,
    pub seed: u64,
    pub simulator: SimulatorKind,
    /// Mean frame count at score 1 and at score 10; linear in between.
    pub duration_at_min_score: f64,
    pub duration_at_max_score: f64,
    /// Log-normal spread of the duration around its mean.
    pub duration_noise: f64,
    /// Standard deviation of per-frame wrist acceleration noise (meters) at scores 1 and 10.
    pub jitter_at_min_score: f64,
    pub jitter_at_max_score: f64,
    /// Event window start and length as fractions of the session.
    pub event_start_fraction: f64,
    pub event_fraction: f64,
    /// Tremor amplitude (meters) is `tremor_base + tremor_gain * (10 - score) / 9`.
    pub tremor_base: f64,
    pub tremor_gain: f64,
    pub tremor_period_frames: f64,
    /// Per-frame probability that a detector drop-out burst starts for an object.
    pub dropout_rate: f64,
    pub max_dropout_burst: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_sessions: 200,
            fps: 30.0,
            seed: 0,
            simulator: SimulatorKind::Suturing,
            duration_at_min_score: 390.0,
            duration_at_max_score: 210.0,
            duration_noise: 0.05,
            jitter_at_min_score: 0.0006,
            jitter_at_max_score: 0.0005,
            event_start_fraction: 0.425,
            event_fraction: 0.15,
            tremor_base: 0.015,
            tremor_gain: 0.035,
            tremor_period_frames: 12.0,
            dropout_rate: 0.01,
            max_dropout_burst: 8,
        }
    }
}

impl GeneratorConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_sessions == 0 {
            return bad("n_sessions must be at least 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if !(self.duration_at_min_score > self.duration_at_max_score) {
            return bad(format!(
                "duration must strictly decrease with score ({} at score 1, {} at score 10)",
                self.duration_at_min_score, self.duration_at_max_score
            ));
        }
        if !(self.duration_at_max_score >= 20.0) {
            return bad("sessions must be at least 20 frames long".into());
        }
        if !(self.jitter_at_min_score >= self.jitter_at_max_score && self.jitter_at_max_score >= 0.0) {
            return bad("jitter must be non-negative and non-increasing in score".into());
        }
        let f = self.event_start_fraction + self.event_fraction;
        if !(self.event_fraction > 0.0 && self.event_start_fraction >= 0.0 && f <= 1.0) {
            return bad("event window must lie inside the session".into());
        }
        if !(self.tremor_base >= 0.0 && self.tremor_gain >= 0.0 && self.tremor_period_frames > 0.0) {
            return bad("tremor parameters must be non-negative with a positive period".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || self.max_dropout_burst == 0 {
            return bad("dropout rate must be in [0, 1) and bursts at least one frame".into());
        }
        if self.duration_noise < 0.0 {
            return bad("duration noise must be non-negative".into());
        }
        Ok(())
    }

    fn lerp(&self, at_min: f64, at_max: f64, score: i32) -> f64 {
        let u = (score - MIN_SCORE) as f64 / (MAX_SCORE - MIN_SCORE) as f64;
        at_min + (at_max - at_min) * u
    }

    pub fn mean_duration(&self, score: i32) -> f64 {
        self.lerp(self.duration_at_min_score, self.duration_at_max_score, score)
    }

    pub fn jitter(&self, score: i32) -> f64 {
        self.lerp(self.jitter_at_min_score, self.jitter_at_max_score, score)
    }

    pub fn tremor_amplitude(&self, score: i32) -> f64 {
        self.tremor_base + self.tremor_gain * (MAX_SCORE - score) as f64 / (MAX_SCORE - MIN_SCORE) as f64
    }
}

/// Planted ground truth of one session. The event window is `[event_start, event_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub session_id: String,
    pub score: i32,
    pub frames: usize,
    pub event_start: usize,
    pub event_end: usize,
    /// Duration multiplier drawn for the session; above 1 means slower than its score implies.
    pub latent_difficulty: f64,
    pub tremor_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub truth: Vec<GroundTruth>,
}

pub fn generate(cfg: &GeneratorConfig) -> Result<SyntheticSet> {
    cfg.validate()?;
    let (sessions, truth): (Vec<_>, Vec<_>) = (0..cfg.n_sessions)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .unzip();
    Ok(SyntheticSet {
        dataset: Dataset::new(sessions)?,
        truth,
    })
}

/// Hand template: wrist at the origin, five fingers of four joints, in meters.
fn hand_template(mirror: f64) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(KEYPOINTS_PER_HAND);
    pts.push([0.0, 0.0, 0.0]);
    for finger in 0..5 {
        let spread = (finger as f64 - 2.0) * 0.35;
        let base = if finger == 0 { 0.025 } else { 0.045 };
        for joint in 0..4 {
            let r = base + 0.022 * joint as f64;
            pts.push([
                mirror * r * spread.sin(),
                -r * spread.cos(),
                0.004 * joint as f64,
            ]);
        }
    }
    pts
}

/// Smooth wrist path: a few low-frequency sinusoids with random phases.
struct Path3 {
    origin: [f64; 3],
    terms: Vec<([f64; 3], f64, f64)>,
}

impl Path3 {
    fn random<R: Rng>(rng: &mut R, origin: [f64; 3], frames: usize) -> Self {
        let terms = (0..3)
            .map(|k| {
                let amp = [
                    rng.random_range(0.01..0.03),
                    rng.random_range(0.01..0.03),
                    rng.random_range(0.0..0.01),
                ];
                let cycles = rng.random_range(1.0..3.0) * (k + 1) as f64;
                let omega = std::f64::consts::TAU * cycles / frames as f64;
                (amp, omega, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { origin, terms }
    }

    fn at(&self, t: f64) -> [f64; 3] {
        let mut p = self.origin;
        for (amp, omega, phase) in &self.terms {
            for (pi, ai) in p.iter_mut().zip(amp) {
                *pi += ai * (omega * t + phase).sin();
            }
        }
        p
    }
}

fn project(p: [f64; 3]) -> [f64; 2] {
    [0.5 + p[0] / p[2], 0.5 + p[1] / p[2]]
}

fn box_around(points: impl Iterator<Item = [f64; 2]>, margin: f64) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for [x, y] in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    fixed_box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0 + 2.0 * margin, y1 - y0 + 2.0 * margin)
}

/// `None` when the center leaves the frame.
fn fixed_box(xc: f64, yc: f64, w: f64, h: f64) -> Option<BoundingBox> {
    if !(0.0..=1.0).contains(&xc) || !(0.0..=1.0).contains(&yc) {
        return None;
    }
    Some(BoundingBox::new(xc, yc, w.clamp(1e-3, 1.0), h.clamp(1e-3, 1.0)))
}

/// Frames where a detector drops an object, as bursts starting at random frames.
fn dropout_mask<R: Rng>(rng: &mut R, frames: usize, rate: f64, max_burst: usize) -> Vec<bool> {
    let mut mask = vec![false; frames];
    let mut t = 0;
    while t < frames {
        if rng.random_bool(rate) {
            let len = rng.random_range(1..=max_burst);
            for m in mask.iter_mut().skip(t).take(len) {
                *m = true;
            }
            t += len;
        } else {
            t += 1;
        }
    }
    mask
}

fn generate_one(cfg: &GeneratorConfig, index: usize) -> (SessionRecording, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let score = rng.random_range(MIN_SCORE..=MAX_SCORE);
    let difficulty = (cfg.duration_noise * std_normal.sample(&mut rng)).exp();
    let frames = ((cfg.mean_duration(score) * difficulty).round() as usize).max(20);
    let event_start = (cfg.event_start_fraction * frames as f64).floor() as usize;
    let event_end = (event_start + (cfg.event_fraction * frames as f64).round() as usize)
        .clamp(event_start + 1, frames);
    let tremor = cfg.tremor_amplitude(score);
    let jitter = cfg.jitter(score);

    let templates = [hand_template(-1.0), hand_template(1.0)];
    let paths = [
        Path3::random(&mut rng, [-0.08, 0.0, 0.5], frames),
        Path3::random(&mut rng, [0.08, 0.0, 0.5], frames),
    ];
    let tremor_phase = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let scissors_span = rng.random_bool(0.5).then(|| {
        let len = frames / 10;
        let start = rng.random_range(0..frames - len);
        start..start + len
    });
    let masks: Vec<Vec<bool>> = (0..5)
        .map(|_| dropout_mask(&mut rng, frames, cfg.dropout_rate, cfg.max_dropout_burst))
        .collect();

    // Damped random-walk offsets per hand, driven by acceleration noise.
    let mut offset = [[0.0; 3]; 2];
    let mut vel = [[0.0; 3]; 2];
    let mut obs = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut frame = FrameObservation::default();
        let mut poses: [Option<HandPose>; 2] = [None, None];
        let mut wrists = [[0.0; 2]; 2];
        for hand in 0..2 {
            for d in 0..3 {
                vel[hand][d] = 0.85 * vel[hand][d] + jitter * std_normal.sample(&mut rng);
                offset[hand][d] = 0.97 * offset[hand][d] + vel[hand][d];
            }
            let mut wrist = paths[hand].at(t as f64);
            for d in 0..3 {
                wrist[d] += offset[hand][d];
            }
            let curl = if (event_start..event_end).contains(&t) {
                let w = std::f64::consts::TAU * t as f64 / cfg.tremor_period_frames + tremor_phase[hand];
                tremor * 0.5 * (1.0 - w.cos())
            } else {
                0.0
            };
            let keypoints: Vec<[f64; 3]> = templates[hand]
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    // Flexion tremor from the rest pose toward the camera; joints further
                    // from the wrist move more.
                    let reach = if i == 0 { 0.0 } else { ((i - 1) % 4 + 1) as f64 / 4.0 };
                    [wrist[0] + k[0], wrist[1] + k[1], wrist[2] + k[2] - curl * reach]
                })
                .collect();
            wrists[hand] = project(wrist);
            let class = if hand == 0 { ObjectClass::LeftHand } else { ObjectClass::RightHand };
            if !masks[hand][t] {
                let b = box_around(keypoints.iter().map(|p| project(*p)), 0.01);
                if b.is_some() {
                    poses[hand] = Some(HandPose { keypoints });
                }
                frame.set_box(class, b);
            }
        }
        [frame.left_pose, frame.right_pose] = poses;
        if !masks[2][t] {
            frame.set_box(ObjectClass::Forceps, fixed_box(wrists[0][0] - 0.03, wrists[0][1] - 0.04, 0.08, 0.05));
        }
        if !masks[3][t] {
            frame.set_box(ObjectClass::NeedleDriver, fixed_box(wrists[1][0] + 0.03, wrists[1][1] - 0.04, 0.08, 0.05));
        }
        if scissors_span.as_ref().is_some_and(|r| r.contains(&t)) && !masks[4][t] {
            frame.set_box(ObjectClass::Scissors, fixed_box(wrists[1][0] + 0.05, wrists[1][1] + 0.02, 0.06, 0.06));
        }
        frame.set_box(ObjectClass::Simulator, fixed_box(0.5, 0.62, 0.6, 0.4));
        obs.push(frame);
    }

    let session_id = format!("synth-{index:04}");
    let session = SessionRecording {
        session_id: session_id.clone(),
        simulator: cfg.simulator,
        fps: cfg.fps,
        frames: obs,
        expert_score: Some(score),
    };
    let truth = GroundTruth {
        session_id,
        score,
        frames,
        event_start,
        event_end,
        latent_difficulty: difficulty,
        tremor_amplitude: tremor,
    };
    (session, truth)
}

/// Writes `sessions.jsonl`, `ground_truth.jsonl`, and `generator.json` into `dir`.
pub fn write_synthetic(set: &SyntheticSet, cfg: &GeneratorConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &[u8]| {
        let path = dir.join(name);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(body))
            .map_err(|e| Error::io(&path, e))
    };
    let mut sessions = String::new();
    for s in set.dataset.sessions() {
        sessions.push_str(&session_to_json_line(s)?);
        sessions.push('\n');
    }
    write("sessions.jsonl", sessions.as_bytes())?;
    let mut truth = String::new();
    for t in &set.truth {
        truth.push_str(&serde_json::to_string(t)?);
        truth.push('\n');
    }
    write("ground_truth.jsonl", truth.as_bytes())?;
    write("generator.json", serde_json::to_string_pretty(cfg)?.as_bytes())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
