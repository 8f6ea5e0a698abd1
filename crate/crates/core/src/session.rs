//! Session data model, the line-delimited JSON session format, and validation.
//!
//! A session file holds one JSON object per line:
//!
//! ```text
//! {"session_id": "s001", "simulator": "suturing", "fps": 30.0, "expert_score": 7,
//!  "frames": [{"boxes": {"left_hand": [0.4, 0.5, 0.1, 0.12], "forceps": null, ...},
//!              "left_pose": [[x, y, z], ... 21 points], "right_pose": null}]}
//! ```
//!
//! Box coordinates are fractions of the frame size. A missing box key and an explicit `null`
//! both mean "not detected in this frame"; the writer always emits explicit nulls.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const KEYPOINTS_PER_HAND: usize = 21;
pub const MIN_SCORE: i32 = 1;
pub const MAX_SCORE: i32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    LeftHand,
    RightHand,
    Forceps,
    NeedleDriver,
    Scissors,
    Simulator,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::LeftHand,
        ObjectClass::RightHand,
        ObjectClass::Forceps,
        ObjectClass::NeedleDriver,
        ObjectClass::Scissors,
        ObjectClass::Simulator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::LeftHand => "left_hand",
            ObjectClass::RightHand => "right_hand",
            ObjectClass::Forceps => "forceps",
            ObjectClass::NeedleDriver => "needle_driver",
            ObjectClass::Scissors => "scissors",
            ObjectClass::Simulator => "simulator",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Suturing,
    KnotTying,
    FascialClosure,
}

impl SimulatorKind {
    pub fn name(self) -> &'static str {
        match self {
            SimulatorKind::Suturing => "suturing",
            SimulatorKind::KnotTying => "knot_tying",
            SimulatorKind::FascialClosure => "fascial_closure",
        }
    }
}

impl fmt::Display for SimulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box, all fields as fractions of the frame size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub xc: f64,
    pub yc: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(xc: f64, yc: f64, w: f64, h: f64) -> Self {
        Self { xc, yc, w, h }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.xc, self.yc]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xc, self.yc, self.w, self.h]
    }
}

/// 21 ordered 3D keypoints in camera-frame meters.
#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    pub keypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameObservation {
    /// Indexed by [`ObjectClass::index`]; `None` means not detected.
    pub boxes: [Option<BoundingBox>; 6],
    pub left_pose: Option<HandPose>,
    pub right_pose: Option<HandPose>,
}

impl FrameObservation {
    pub fn bbox(&self, class: ObjectClass) -> Option<&BoundingBox> {
        self.boxes[class.index()].as_ref()
    }

    pub fn set_box(&mut self, class: ObjectClass, b: Option<BoundingBox>) {
        self.boxes[class.index()] = b;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecording {
    pub session_id: String,
    pub simulator: SimulatorKind,
    pub fps: f64,
    pub frames: Vec<FrameObservation>,
    pub expert_score: Option<i32>,
}

impl SessionRecording {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    KeypointCount,
    NonFinite,
    OutOfRange,
    Empty,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::KeypointCount => "keypoint count",
            ViolationKind::NonFinite => "non-finite",
            ViolationKind::OutOfRange => "out of range",
            ViolationKind::Empty => "empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.kind, self.detail)
    }
}

/// Checks every type invariant of a session. An empty list means the session is valid.
pub fn validate_session(s: &SessionRecording) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, kind, detail: String| {
        out.push(Violation {
            field,
            kind,
            detail,
        })
    };

    if !s.fps.is_finite() {
        push("fps".into(), ViolationKind::NonFinite, format!("{}", s.fps));
    } else if s.fps <= 0.0 {
        push("fps".into(), ViolationKind::OutOfRange, format!("{} <= 0", s.fps));
    }
    if let Some(score) = s.expert_score {
        if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
            push(
                "expert_score".into(),
                ViolationKind::OutOfRange,
                format!("{score} not in {MIN_SCORE}..={MAX_SCORE}"),
            );
        }
    }
    if s.frames.is_empty() {
        push("frames".into(), ViolationKind::Empty, "no frames".into());
    }

    for (t, frame) in s.frames.iter().enumerate() {
        for class in ObjectClass::ALL {
            let Some(b) = frame.bbox(class) else { continue };
            let field = format!("frames[{t}].boxes.{class}");
            let vals = b.to_array();
            if vals.iter().any(|v| !v.is_finite()) {
                push(field, ViolationKind::NonFinite, format!("{vals:?}"));
                continue;
            }
            let center_ok = (0.0..=1.0).contains(&b.xc) && (0.0..=1.0).contains(&b.yc);
            let size_ok = b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0;
            if !center_ok || !size_ok {
                push(field, ViolationKind::OutOfRange, format!("{vals:?}"));
            }
        }
        for (side, pose) in [("left_pose", &frame.left_pose), ("right_pose", &frame.right_pose)] {
            let Some(pose) = pose else { continue };
            let field = format!("frames[{t}].{side}");
            if pose.keypoints.len() != KEYPOINTS_PER_HAND {
                push(
                    field.clone(),
                    ViolationKind::KeypointCount,
                    format!("{} points, expected {KEYPOINTS_PER_HAND}", pose.keypoints.len()),
                );
            }
            if pose.keypoints.iter().flatten().any(|v| !v.is_finite()) {
                push(field, ViolationKind::NonFinite, "keypoint coordinate".into());
            }
        }
    }
    out
}

/// A validated collection of sessions from a single simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sessions: Vec<SessionRecording>,
}

impl Dataset {
    pub fn new(sessions: Vec<SessionRecording>) -> Result<Self> {
        let Some(first) = sessions.first() else {
            return Err(Error::Dataset("no sessions".into()));
        };
        let simulator = first.simulator;
        let mut seen = HashSet::new();
        for s in &sessions {
            if let Some(v) = validate_session(s).into_iter().next() {
                return Err(Error::Validation {
                    session_id: s.session_id.clone(),
                    field: v.field,
                    message: format!("{} ({})", v.kind, v.detail),
                });
            }
            if !seen.insert(s.session_id.as_str()) {
                return Err(Error::Validation {
                    session_id: s.session_id.clone(),
                    field: "session_id".into(),
                    message: format!("duplicate session_id {:?}", s.session_id),
                });
            }
            if s.simulator != simulator {
                return Err(Error::Validation {
                    session_id: s.session_id.clone(),
                    field: "simulator".into(),
                    message: format!("{} differs from dataset simulator {simulator}", s.simulator),
                });
            }
        }
        Ok(Self { sessions })
    }

    pub fn sessions(&self) -> &[SessionRecording] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn simulator(&self) -> SimulatorKind {
        self.sessions[0].simulator
    }

    pub fn get(&self, session_id: &str) -> Option<&SessionRecording> {
        self.sessions.iter().find(|s| s.session_id == session_id)
    }

    /// Sessions selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.sessions[i].clone()).collect())
    }

    pub fn into_sessions(self) -> Vec<SessionRecording> {
        self.sessions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Reject unknown fields instead of warning about them.
    pub strict: bool,
}

const SESSION_FIELDS: &[&str] = &["session_id", "simulator", "fps", "expert_score", "frames"];
const FRAME_FIELDS: &[&str] = &["boxes", "left_pose", "right_pose"];

#[derive(Serialize, Deserialize)]
struct RawSession {
    session_id: String,
    simulator: SimulatorKind,
    fps: f64,
    #[serde(default)]
    expert_score: Option<i32>,
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize, Default)]
struct RawBoxes {
    #[serde(default)]
    left_hand: Option<[f64; 4]>,
    #[serde(default)]
    right_hand: Option<[f64; 4]>,
    #[serde(default)]
    forceps: Option<[f64; 4]>,
    #[serde(default)]
    needle_driver: Option<[f64; 4]>,
    #[serde(default)]
    scissors: Option<[f64; 4]>,
    #[serde(default)]
    simulator: Option<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    #[serde(default)]
    boxes: RawBoxes,
    #[serde(default)]
    left_pose: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    right_pose: Option<Vec<[f64; 3]>>,
}

impl From<RawFrame> for FrameObservation {
    fn from(r: RawFrame) -> Self {
        let to_box = |a: Option<[f64; 4]>| a.map(|[xc, yc, w, h]| BoundingBox { xc, yc, w, h });
        let b = r.boxes;
        FrameObservation {
            boxes: [
                to_box(b.left_hand),
                to_box(b.right_hand),
                to_box(b.forceps),
                to_box(b.needle_driver),
                to_box(b.scissors),
                to_box(b.simulator),
            ],
            left_pose: r.left_pose.map(|keypoints| HandPose { keypoints }),
            right_pose: r.right_pose.map(|keypoints| HandPose { keypoints }),
        }
    }
}

impl From<&FrameObservation> for RawFrame {
    fn from(f: &FrameObservation) -> Self {
        let arr = |c: ObjectClass| f.bbox(c).map(|b| b.to_array());
        RawFrame {
            boxes: RawBoxes {
                left_hand: arr(ObjectClass::LeftHand),
                right_hand: arr(ObjectClass::RightHand),
                forceps: arr(ObjectClass::Forceps),
                needle_driver: arr(ObjectClass::NeedleDriver),
                scissors: arr(ObjectClass::Scissors),
                simulator: arr(ObjectClass::Simulator),
            },
            left_pose: f.left_pose.as_ref().map(|p| p.keypoints.clone()),
            right_pose: f.right_pose.as_ref().map(|p| p.keypoints.clone()),
        }
    }
}

/// Collects the dotted paths of every field not in the documented schema.
fn unknown_fields(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(obj) = value.as_object() else {
        return out;
    };
    for key in obj.keys().filter(|k| !SESSION_FIELDS.contains(&k.as_str())) {
        out.push(key.clone());
    }
    if let Some(frames) = obj.get("frames").and_then(Value::as_array) {
        for (t, frame) in frames.iter().enumerate() {
            let Some(fobj) = frame.as_object() else { continue };
            for key in fobj.keys().filter(|k| !FRAME_FIELDS.contains(&k.as_str())) {
                out.push(format!("frames[{t}].{key}"));
            }
            if let Some(boxes) = fobj.get("boxes").and_then(Value::as_object) {
                for key in boxes.keys().filter(|k| ObjectClass::from_name(k).is_none()) {
                    out.push(format!("frames[{t}].boxes.{key}"));
                }
            }
        }
    }
    out
}

fn parse_record(text: &str, path: &Path, line: usize, opts: LoadOptions) -> Result<SessionRecording> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let value: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let unknown = unknown_fields(&value);
    if !unknown.is_empty() {
        if opts.strict {
            return Err(parse_err(format!("unknown fields: {}", unknown.join(", "))));
        }
        log::warn!("{}:{line}: ignoring unknown fields: {}", path.display(), unknown.join(", "));
    }
    let raw: RawSession = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
    Ok(SessionRecording {
        session_id: raw.session_id,
        simulator: raw.simulator,
        fps: raw.fps,
        expert_score: raw.expert_score,
        frames: raw.frames.into_iter().map(FrameObservation::from).collect(),
    })
}

fn session_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str());
        if p.is_file() && matches!(ext, Some("jsonl") | Some("json")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads a session file, or every `.jsonl`/`.json` file of a directory in name order.
///
/// `.jsonl` files hold one session per line; a `.json` file holds exactly one session,
/// possibly pretty-printed.
pub fn load_sessions(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut sessions = Vec::new();
    for file in session_files(path)? {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        if file.extension().and_then(|e| e.to_str()) == Some("json") {
            sessions.push(parse_record(&text, &file, 1, opts)?);
            continue;
        }
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            sessions.push(parse_record(line, &file, i + 1, opts)?);
        }
    }
    if sessions.is_empty() {
        return Err(Error::Dataset(format!("no sessions found in {}", path.display())));
    }
    Dataset::new(sessions)
}

pub fn session_to_json_line(s: &SessionRecording) -> Result<String> {
    let raw = RawSession {
        session_id: s.session_id.clone(),
        simulator: s.simulator,
        fps: s.fps,
        expert_score: s.expert_score,
        frames: s.frames.iter().map(RawFrame::from).collect(),
    };
    Ok(serde_json::to_string(&raw)?)
}

/// Writes one session per line, in dataset order.
pub fn save_sessions(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in dataset.sessions() {
        out.extend_from_slice(session_to_json_line(s)?.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
