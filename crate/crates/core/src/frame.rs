//! Per-frame feature matrix: 6 boxes x (xc, yc, w, h) followed by 2 hands x 21 keypoints x
//! (x, y, z), gap-filled and smoothed channel by channel.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{ObjectClass, SessionRecording, KEYPOINTS_PER_HAND};

pub const BOX_CHANNELS: usize = 6 * 4;
pub const KEYPOINT_CHANNELS: usize = 2 * KEYPOINTS_PER_HAND * 3;
pub const NUM_CHANNELS: usize = BOX_CHANNELS + KEYPOINT_CHANNELS;

/// One coordinate channel of one object, `None` where the object was not detected.
pub type Track = Vec<Option<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub max_gap: usize,
    pub window: usize,
    pub polyorder: usize,
    pub smooth_boxes: bool,
    pub smooth_keypoints: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_gap: 10,
            window: 9,
            polyorder: 3,
            smooth_boxes: true,
            smooth_keypoints: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("smoothing window {} must be odd", self.window)));
        }
        if self.polyorder >= self.window {
            return Err(Error::Config(format!(
                "polyorder {} must be below window {}",
                self.polyorder, self.window
            )));
        }
        Ok(())
    }

    fn smoothing_enabled(&self) -> bool {
        self.smooth_boxes || self.smooth_keypoints
    }
}

/// Fills every internal run of at most `max_gap` missing samples by linear interpolation
/// between its two bounding samples. Longer runs and runs touching either end are kept.
pub fn interpolate_gaps(track: &[Option<f64>], max_gap: usize) -> Track {
    let mut out = track.to_vec();
    let mut last_present: Option<usize> = None;
    for i in 0..track.len() {
        let Some(right) = track[i] else { continue };
        if let Some(l) = last_present {
            let gap = i - l - 1;
            if gap > 0 && gap <= max_gap {
                let left = track[l].expect("last_present points at a sample");
                let span = (i - l) as f64;
                for (k, slot) in out.iter_mut().enumerate().take(i).skip(l + 1) {
                    let frac = (k - l) as f64 / span;
                    *slot = Some(left + (right - left) * frac);
                }
            }
        }
        last_present = Some(i);
    }
    out
}

/// Replaces remaining gaps with the last observed value. Frames before the first observation
/// take the first observed value; a channel that is never observed becomes all zeros.
pub fn fill_residual(track: &[Option<f64>]) -> Vec<f64> {
    let Some(first) = track.iter().flatten().next().copied() else {
        return vec![0.0; track.len()];
    };
    let mut last = first;
    track
        .iter()
        .map(|v| {
            if let Some(v) = v {
                last = *v;
            }
            last
        })
        .collect()
}

/// Least-squares smoothing weights for a window spanning `left` samples before and `right`
/// samples after the evaluated point.
fn savgol_weights(left: usize, right: usize, polyorder: usize) -> Vec<f64> {
    let len = left + right + 1;
    let degree = polyorder.min(len - 1);
    let a = DMatrix::from_fn(len, degree + 1, |r, c| (r as f64 - left as f64).powi(c as i32));
    let pinv = a
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .expect("SVD computed with both factors");
    pinv.row(0).iter().copied().collect()
}

/// Savitzky-Golay smoothing. Each output is the value at the window center of the degree
/// `polyorder` least-squares polynomial fitted to the window; near the ends the window is
/// truncated to the available samples instead of padded.
pub fn savitzky_golay(values: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) {
        return Err(Error::Config(format!("smoothing window {window} must be odd")));
    }
    if polyorder >= window {
        return Err(Error::Config(format!(
            "polyorder {polyorder} must be below window {window}"
        )));
    }
    let n = values.len();
    if n < window {
        return Err(Error::Config(format!(
            "signal of {n} samples is shorter than smoothing window {window}"
        )));
    }
    let half = window / 2;
    let mut cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let left = i.min(half);
        let right = (n - 1 - i).min(half);
        let w = cache
            .entry((left, right))
            .or_insert_with(|| savgol_weights(left, right, polyorder));
        let start = i - left;
        out.push(w.iter().zip(&values[start..]).map(|(c, v)| c * v).sum());
    }
    Ok(out)
}

/// Names of all 150 channels in matrix row order.
pub fn channel_layout() -> Vec<String> {
    let mut names = Vec::with_capacity(NUM_CHANNELS);
    for class in ObjectClass::ALL {
        for field in ["xc", "yc", "w", "h"] {
            names.push(format!("box.{class}.{field}"));
        }
    }
    for side in ["left", "right"] {
        for j in 0..KEYPOINTS_PER_HAND {
            for axis in ["x", "y", "z"] {
                names.push(format!("kp.{side}.{j:02}.{axis}"));
            }
        }
    }
    names
}

/// Dense channel-major matrix: `data[c * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
}

impl FeatureMatrix {
    pub fn from_channels(channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.len() != NUM_CHANNELS {
            return Err(Error::shape(
                "feature matrix",
                format!("{} channels, expected {NUM_CHANNELS}", channels.len()),
            ));
        }
        let frames = channels[0].len();
        if channels.iter().any(|c| c.len() != frames) {
            return Err(Error::shape("feature matrix", "ragged channels"));
        }
        Ok(Self {
            data: channels.concat(),
            frames,
        })
    }

    pub fn rows(&self) -> usize {
        NUM_CHANNELS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn get(&self, channel: usize, frame: usize) -> f64 {
        self.data[channel * self.frames + frame]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn raw_tracks(s: &SessionRecording) -> Vec<Track> {
    let mut tracks = Vec::with_capacity(NUM_CHANNELS);
    for class in ObjectClass::ALL {
        for k in 0..4 {
            tracks.push(
                s.frames
                    .iter()
                    .map(|f| f.bbox(class).map(|b| b.to_array()[k]))
                    .collect(),
            );
        }
    }
    for left in [true, false] {
        for j in 0..KEYPOINTS_PER_HAND {
            for axis in 0..3 {
                tracks.push(
                    s.frames
                        .iter()
                        .map(|f| {
                            let pose = if left { &f.left_pose } else { &f.right_pose };
                            pose.as_ref().map(|p| p.keypoints[j][axis])
                        })
                        .collect(),
                );
            }
        }
    }
    tracks
}

/// Gap interpolation, residual fill, then smoothing, for every channel of a valid session.
pub fn build_feature_matrix(s: &SessionRecording, cfg: &PreprocessConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if cfg.smoothing_enabled() && s.frames.len() < cfg.window {
        return Err(Error::TooShort {
            session_id: s.session_id.clone(),
            frames: s.frames.len(),
            minimum: cfg.window,
            reason: "smoothing window",
        });
    }
    let channels = raw_tracks(s)
        .into_iter()
        .enumerate()
        .map(|(c, track)| {
            let filled = fill_residual(&interpolate_gaps(&track, cfg.max_gap));
            let smooth = if c < BOX_CHANNELS {
                cfg.smooth_boxes
            } else {
                cfg.smooth_keypoints
            };
            if smooth {
                savitzky_golay(&filled, cfg.window, cfg.polyorder)
            } else {
                Ok(filled)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_channels(channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::minimal_session;
    use proptest::prelude::*;

    #[test]
    fn interpolates_short_internal_gap() {
        let t = vec![Some(0.0), None, None, Some(3.0)];
        assert_eq!(
            interpolate_gaps(&t, 10),
            vec![Some(0.0), Some(1.0), Some(2.0), Some(3.0)]
        );
    }

    #[test]
    fn eleven_frame_gap_untouched() {
        let mut t = vec![Some(1.0)];
        t.extend(std::iter::repeat_n(None, 11));
        t.push(Some(5.0));
        assert_eq!(interpolate_gaps(&t, 10), t);
        let mut ten = vec![Some(1.0)];
        ten.extend(std::iter::repeat_n(None, 10));
        ten.push(Some(5.0));
        assert!(interpolate_gaps(&ten, 10).iter().all(Option::is_some));
    }

    #[test]
    fn boundary_gaps_untouched() {
        let t = vec![None, Some(1.0), Some(2.0), None];
        assert_eq!(interpolate_gaps(&t, 10), t);
    }

    #[test]
    fn no_gaps_identity() {
        let t: Track = (0..7).map(|i| Some(i as f64 * 0.5)).collect();
        assert_eq!(interpolate_gaps(&t, 10), t);
        assert_eq!(interpolate_gaps(&t, 0), t);
    }

    #[test]
    fn residual_fill_rules() {
        assert_eq!(fill_residual(&[None, None]), vec![0.0, 0.0]);
        assert_eq!(
            fill_residual(&[None, Some(2.0), None, Some(3.0), None]),
            vec![2.0, 2.0, 2.0, 3.0, 3.0]
        );
    }

    #[test]
    fn savgol_constant_unchanged() {
        let v = vec![5.0; 15];
        for x in savitzky_golay(&v, 9, 3).unwrap() {
            assert!((x - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn savgol_reproduces_cubic() {
        let v: Vec<f64> = (0..20).map(|i| (i as f64).powi(3)).collect();
        let s = savitzky_golay(&v, 9, 3).unwrap();
        for (a, b) in s.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn savgol_reproduces_ramp() {
        let v: Vec<f64> = (0..12).map(|i| 2.0 * i as f64 + 1.0).collect();
        let s = savitzky_golay(&v, 9, 1).unwrap();
        for (a, b) in s.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn savgol_matches_tabulated_interior_weights() {
        // Classic 5-point quadratic weights: (-3, 12, 17, 12, -3) / 35.
        let w = savgol_weights(2, 2, 2);
        let expected = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|x| x / 35.0);
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn savgol_rejects_bad_parameters() {
        let v = vec![0.0; 20];
        assert!(savitzky_golay(&v, 8, 3).is_err());
        assert!(savitzky_golay(&v, 5, 5).is_err());
        assert!(savitzky_golay(&v[..4], 5, 2).is_err());
    }

    #[test]
    fn layout_has_150_unique_channels() {
        let names = channel_layout();
        assert_eq!(names.len(), 150);
        assert_eq!(names[0], "box.left_hand.xc");
        assert_eq!(names[23], "box.simulator.h");
        assert_eq!(names[24], "kp.left.00.x");
        assert_eq!(names[149], "kp.right.20.z");
        let uniq: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(uniq.len(), 150);
    }

    #[test]
    fn fully_detected_session_shape() {
        let s = minimal_session("a", 20);
        let m = build_feature_matrix(&s, &PreprocessConfig::default()).unwrap();
        assert_eq!((m.rows(), m.frames()), (150, 20));
        assert!(m.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn absent_hand_channels_interpolated() {
        let mut s = minimal_session("a", 12);
        for (t, f) in s.frames.iter_mut().enumerate() {
            let p = f.left_pose.as_mut().unwrap();
            for kp in p.keypoints.iter_mut() {
                kp[0] += 0.01 * t as f64;
            }
        }
        let frame2 = s.frames[2].left_pose.clone().unwrap().keypoints[0][0];
        let frame6 = s.frames[6].left_pose.clone().unwrap().keypoints[0][0];
        for t in 3..=5 {
            s.frames[t].left_pose = None;
        }
        let cfg = PreprocessConfig {
            smooth_boxes: false,
            smooth_keypoints: false,
            ..Default::default()
        };
        let m = build_feature_matrix(&s, &cfg).unwrap();
        let ch = BOX_CHANNELS; // kp.left.00.x
        assert!((m.get(ch, 4) - 0.5 * (frame2 + frame6)).abs() < 1e-15);
    }

    #[test]
    fn never_seen_forceps_filled_with_zero() {
        let s = minimal_session("a", 12);
        let m = build_feature_matrix(&s, &PreprocessConfig::default()).unwrap();
        for c in 8..12 {
            assert!(m.channel(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn too_short_session_errors() {
        let s = minimal_session("short", 5);
        let err = build_feature_matrix(&s, &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooShort { minimum: 9, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn interpolation_is_idempotent(track in prop::collection::vec(prop::option::of(-10.0f64..10.0), 0..60), gap in 0usize..12) {
            let once = interpolate_gaps(&track, gap);
            prop_assert_eq!(interpolate_gaps(&once, gap), once);
        }

        #[test]
        fn savgol_reproduces_polynomials(coeffs in prop::collection::vec(-2.0f64..2.0, 4), n in 9usize..40) {
            let v: Vec<f64> = (0..n).map(|i| {
                let x = i as f64 / 4.0;
                coeffs.iter().enumerate().map(|(p, c)| c * x.powi(p as i32)).sum()
            }).collect();
            let s = savitzky_golay(&v, 9, 3).unwrap();
            for (a, b) in s.iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
