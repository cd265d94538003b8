//! Gaze and detection stream ingestion.
//!
//! Gaze arrives at roughly 120 Hz in scene-camera pixels; detections arrive per
//! scene frame at 30 Hz. Everything downstream works on the frame clock, so gaze
//! is averaged into frame intervals here and boxes are grouped into per-object
//! tracks.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::WorldState;

/// Nominal scene-camera frame period at 30 Hz.
pub const FRAME_PERIOD_US: i64 = 33_333;
/// Nominal gaze sample period at 120 Hz.
pub const GAZE_PERIOD_US: i64 = 8_333;

/// Gaps in a track shorter than this many frames are bridged with the last box.
pub const TRACK_GAP_FILL: usize = 5;
/// Minimum IoU to continue a track for detections without an id.
pub const TRACK_IOU_MIN: f64 = 0.3;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("stream order violated in {stream} at index {index}: {detail}")]
    StreamOrder {
        stream: &'static str,
        index: usize,
        detail: String,
    },
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: frame_idx {got} does not follow {prev}")]
    NonMonotonicFrame { line: usize, prev: i64, got: i64 },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub width_px: u32,
    pub height_px: u32,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            width_px: 1088,
            height_px: 1080,
        }
    }
}

impl SceneGeometry {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self, PerceptionError> {
        if width_px == 0 || height_px == 0 {
            return Err(PerceptionError::Geometry(format!(
                "{width_px}x{height_px} has a zero side"
            )));
        }
        Ok(Self {
            width_px,
            height_px,
        })
    }

    pub fn width(&self) -> f64 {
        self.width_px as f64
    }

    pub fn height(&self) -> f64 {
        self.height_px as f64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width()).contains(&x) && (0.0..=self.height()).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t_us: i64,
    pub gx: f64,
    pub gy: f64,
    pub on_screen: bool,
}

impl GazeSample {
    pub fn new(t_us: i64, gx: f64, gy: f64) -> Self {
        Self {
            t_us,
            gx,
            gy,
            on_screen: true,
        }
    }

    pub fn off_screen(t_us: i64) -> Self {
        Self {
            t_us,
            gx: -1.0,
            gy: -1.0,
            on_screen: false,
        }
    }
}

/// A 2D point in scene pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box in scene pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn within(&self, geometry: &SceneGeometry) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= geometry.width()
            && self.y_max <= geometry.height()
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn expanded(&self, margin: f64) -> BBox {
        BBox::new(
            self.x_min - margin,
            self.y_min - margin,
            self.x_max + margin,
            self.y_max + margin,
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Stable object identity. Empty when the source does not provide one.
    pub object_id: String,
    pub label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_idx: i64,
    pub t_us: i64,
    pub gaze: Option<Point>,
    pub detections: Vec<Detection>,
}

/// One frame's gaze after alignment.
///
/// `observed` is false when no on-screen sample fell inside the frame interval and
/// the point (if any) was carried over from an earlier frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedGaze {
    pub point: Option<Point>,
    pub observed: bool,
}

impl AlignedGaze {
    pub const ABSENT: AlignedGaze = AlignedGaze {
        point: None,
        observed: false,
    };
}

/// Average gaze samples into frame intervals `[t_f, t_{f+1})`.
///
/// The last frame's interval is closed by the nominal frame period. Frames with no
/// on-screen samples carry the previous frame's value; leading empty frames stay
/// absent.
pub fn align_gaze_to_frames(
    gaze: &[GazeSample],
    frame_times: &[i64],
) -> Result<Vec<AlignedGaze>, PerceptionError> {
    check_increasing("gaze", gaze.iter().map(|s| s.t_us))?;
    check_increasing("frames", frame_times.iter().copied())?;

    let mut out = Vec::with_capacity(frame_times.len());
    let mut carried: Option<Point> = None;
    let mut cursor = 0usize;
    for (f, &t_start) in frame_times.iter().enumerate() {
        let t_end = frame_times
            .get(f + 1)
            .copied()
            .unwrap_or(t_start + FRAME_PERIOD_US);
        while cursor < gaze.len() && gaze[cursor].t_us < t_start {
            cursor += 1;
        }
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        while cursor < gaze.len() && gaze[cursor].t_us < t_end {
            let s = &gaze[cursor];
            if s.on_screen {
                sx += s.gx;
                sy += s.gy;
                n += 1;
            }
            cursor += 1;
        }
        if n > 0 {
            let p = Point::new(sx / n as f64, sy / n as f64);
            carried = Some(p);
            out.push(AlignedGaze {
                point: Some(p),
                observed: true,
            });
        } else {
            out.push(AlignedGaze {
                point: carried,
                observed: false,
            });
        }
    }
    Ok(out)
}

fn check_increasing(
    stream: &'static str,
    times: impl Iterator<Item = i64>,
) -> Result<(), PerceptionError> {
    let mut prev: Option<i64> = None;
    for (index, t) in times.enumerate() {
        if let Some(p) = prev {
            if t <= p {
                return Err(PerceptionError::StreamOrder {
                    stream,
                    index,
                    detail: format!("t_us {t} after {p}"),
                });
            }
        }
        prev = Some(t);
    }
    Ok(())
}

/// Ground-truth detector over the simulated world: one detection per object that
/// sits on the table (held or contained objects are not visible).
pub fn mock_detect(world: &WorldState, geometry: &SceneGeometry) -> Vec<Detection> {
    world
        .objects
        .iter()
        .filter(|(_, o)| o.is_visible())
        .filter_map(|(label, o)| {
            let bbox = o.bbox?;
            (bbox.is_valid() && bbox.within(geometry)).then(|| Detection {
                object_id: label.clone(),
                label: label.clone(),
                bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireDetection {
    #[serde(default)]
    pub id: String,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireFrame {
    pub frame_idx: i64,
    pub t_us: i64,
    pub detections: Vec<WireDetection>,
}

impl From<&FrameRecord> for WireFrame {
    fn from(f: &FrameRecord) -> Self {
        WireFrame {
            frame_idx: f.frame_idx,
            t_us: f.t_us,
            detections: f
                .detections
                .iter()
                .map(|d| WireDetection {
                    id: d.object_id.clone(),
                    label: d.label.clone(),
                    bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                })
                .collect(),
        }
    }
}

/// Parse a line-delimited frame stream. Blank lines are skipped; line numbers are
/// 1-based.
pub fn ingest_detection_stream<R: BufRead>(source: R) -> Result<Vec<FrameRecord>, PerceptionError> {
    let mut frames: Vec<FrameRecord> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireFrame = serde_json::from_str(&line).map_err(|e| PerceptionError::Malformed {
            line: line_no,
            detail: e.to_string(),
        })?;
        if let Some(prev) = frames.last() {
            if wire.frame_idx != prev.frame_idx + 1 {
                return Err(PerceptionError::NonMonotonicFrame {
                    line: line_no,
                    prev: prev.frame_idx,
                    got: wire.frame_idx,
                });
            }
        }
        let mut detections = Vec::with_capacity(wire.detections.len());
        for d in wire.detections {
            let [x0, y0, x1, y1] = d.bbox;
            let bbox = BBox::new(x0, y0, x1, y1);
            if !bbox.is_valid() {
                return Err(PerceptionError::Malformed {
                    line: line_no,
                    detail: format!("degenerate box for {}", d.label),
                });
            }
            detections.push(Detection {
                object_id: d.id,
                label: d.label,
                bbox,
            });
        }
        frames.push(FrameRecord {
            frame_idx: wire.frame_idx,
            t_us: wire.t_us,
            gaze: None,
            detections,
        });
    }
    Ok(frames)
}

/// Parse a line-delimited gaze stream and check timestamp order.
pub fn ingest_gaze_stream<R: BufRead>(source: R) -> Result<Vec<GazeSample>, PerceptionError> {
    let mut out: Vec<GazeSample> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: GazeSample = serde_json::from_str(&line).map_err(|e| PerceptionError::Malformed {
            line: line_no,
            detail: e.to_string(),
        })?;
        if let Some(prev) = out.last() {
            if s.t_us <= prev.t_us {
                return Err(PerceptionError::StreamOrder {
                    stream: "gaze",
                    index: line_no,
                    detail: format!("t_us {} after {}", s.t_us, prev.t_us),
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Per-frame box history of one object. `boxes[i]` belongs to the i-th frame of
/// the tracked sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub object_id: String,
    pub label: String,
    pub boxes: Vec<Option<BBox>>,
}

impl ObjectTrack {
    /// Number of frames with a box.
    pub fn len(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Group detections into tracks keyed by object id.
///
/// Detections with an empty id are matched greedily (highest IoU first) against
/// the previous-frame boxes of tracks with the same label; unmatched ones open a
/// new track named `<label>#<n>`.
pub fn track_objects(frames: &[FrameRecord]) -> BTreeMap<String, ObjectTrack> {
    let n = frames.len();
    let mut tracks: BTreeMap<String, ObjectTrack> = BTreeMap::new();
    // last seen (frame index, box) for each track, used for id-less matching
    let mut last_seen: BTreeMap<String, (usize, BBox)> = BTreeMap::new();
    let mut fresh = 0usize;

    for (f, frame) in frames.iter().enumerate() {
        let mut assigned: Vec<(String, &Detection)> = Vec::new();
        let mut anonymous: Vec<&Detection> = Vec::new();
        for d in &frame.detections {
            if d.object_id.is_empty() {
                anonymous.push(d);
            } else {
                assigned.push((d.object_id.clone(), d));
            }
        }

        if !anonymous.is_empty() {
            let mut candidates: Vec<(f64, usize, String)> = Vec::new();
            for (ai, d) in anonymous.iter().enumerate() {
                for (id, (seen_at, bbox)) in &last_seen {
                    if f - seen_at > TRACK_GAP_FILL || tracks[id].label != d.label {
                        continue;
                    }
                    if assigned.iter().any(|(a, _)| a == id) {
                        continue;
                    }
                    let iou = d.bbox.iou(bbox);
                    if iou >= TRACK_IOU_MIN {
                        candidates.push((iou, ai, id.clone()));
                    }
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut used_det = vec![false; anonymous.len()];
            let mut used_track: Vec<String> = Vec::new();
            for (_, ai, id) in candidates {
                if used_det[ai] || used_track.contains(&id) {
                    continue;
                }
                used_det[ai] = true;
                used_track.push(id.clone());
                assigned.push((id, anonymous[ai]));
            }
            for (ai, d) in anonymous.iter().enumerate() {
                if !used_det[ai] {
                    let id = format!("{}#{}", d.label, fresh);
                    fresh += 1;
                    assigned.push((id, d));
                }
            }
        }

        for (id, d) in assigned {
            let track = tracks.entry(id.clone()).or_insert_with(|| ObjectTrack {
                object_id: id.clone(),
                label: d.label.clone(),
                boxes: vec![None; n],
            });
            track.boxes[f] = Some(d.bbox);
            last_seen.insert(id, (f, d.bbox));
        }
    }

    for track in tracks.values_mut() {
        fill_gaps(&mut track.boxes);
    }
    tracks
}

fn fill_gaps(boxes: &mut [Option<BBox>]) {
    let mut last: Option<(usize, BBox)> = None;
    let mut i = 0;
    while i < boxes.len() {
        match boxes[i] {
            Some(b) => {
                last = Some((i, b));
                i += 1;
            }
            None => {
                let gap_end = (i..boxes.len()).find(|&j| boxes[j].is_some());
                match (last, gap_end) {
                    (Some((_, held)), Some(end)) if end - i < TRACK_GAP_FILL => {
                        for slot in &mut boxes[i..end] {
                            *slot = Some(held);
                        }
                        i = end;
                    }
                    (_, Some(end)) => i = end,
                    (_, None) => break,
                }
            }
        }
    }
}

/// Summary produced by the `ingest` command.
#[derive(Debug, Clone, Serialize)]
pub struct StreamStats {
    pub gaze_samples: usize,
    pub off_screen_samples: usize,
    pub frames: usize,
    pub frames_without_gaze: usize,
    pub objects: usize,
    pub mean_gaze_rate_hz: f64,
}

pub fn stream_stats(gaze: &[GazeSample], frames: &[FrameRecord]) -> Result<StreamStats, PerceptionError> {
    let times: Vec<i64> = frames.iter().map(|f| f.t_us).collect();
    let aligned = align_gaze_to_frames(gaze, &times)?;
    let tracks = track_objects(frames);
    let rate = match (gaze.first(), gaze.last()) {
        (Some(a), Some(b)) if b.t_us > a.t_us => {
            (gaze.len() - 1) as f64 / ((b.t_us - a.t_us) as f64 * 1e-6)
        }
        _ => 0.0,
    };
    Ok(StreamStats {
        gaze_samples: gaze.len(),
        off_screen_samples: gaze.iter().filter(|s| !s.on_screen).count(),
        frames: frames.len(),
        frames_without_gaze: aligned.iter().filter(|a| a.point.is_none()).count(),
        objects: tracks.len(),
        mean_gaze_rate_hz: rate,
    })
}
