//! Per-object gaze features and sliding windows.
//!
//! Each frame contributes `[gx, gy, ratio]` for an object, where `ratio` is the
//! box half-diagonal divided by the distance from the box center to the gaze
//! point. Windows of `sw` consecutive frames form the network input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::{AlignedGaze, BBox, ObjectTrack, Point, SceneGeometry};

pub const NUM_FEATURES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("window frame {0} has no intent mark")]
    MissingMark(usize),
    #[error("empty window")]
    EmptyWindow,
    #[error("batch shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sw: usize,
    pub stride: usize,
    /// Divide gaze by scene width/height; raw pixels otherwise.
    pub normalize_gaze: bool,
    pub ratio_cap: f64,
    /// Floor on the center-to-gaze distance, in pixels.
    pub eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sw: 30,
            stride: 10,
            normalize_gaze: true,
            ratio_cap: 10.0,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub gx: f64,
    pub gy: f64,
    pub ratio: f64,
}

impl FeatureFrame {
    pub fn to_array(self) -> [f64; NUM_FEATURES] {
        [self.gx, self.gy, self.ratio]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub object_id: String,
    pub start_frame: usize,
    pub values: Vec<[f64; NUM_FEATURES]>,
    pub label: Option<u8>,
}

/// Distance from the box center to a corner.
pub fn half_diagonal(b: &BBox) -> f64 {
    (b.width() / 2.0).hypot(b.height() / 2.0)
}

/// `half_diagonal / max(center-to-gaze distance, eps)`, capped at `ratio_cap`.
pub fn gaze_ratio(b: &BBox, gaze: Point, cfg: &FeatureConfig) -> f64 {
    let d1 = half_diagonal(b);
    let d2 = b.center().dist(gaze).max(cfg.eps);
    (d1 / d2).min(cfg.ratio_cap)
}

/// Feature frame for one object at one frame; absent without both a box and gaze.
pub fn feature_frame(
    bbox: Option<&BBox>,
    gaze: &AlignedGaze,
    geometry: &SceneGeometry,
    cfg: &FeatureConfig,
) -> Option<FeatureFrame> {
    let b = bbox?;
    let g = gaze.point?;
    let (gx, gy) = if cfg.normalize_gaze {
        (
            (g.x / geometry.width()).clamp(0.0, 1.0),
            (g.y / geometry.height()).clamp(0.0, 1.0),
        )
    } else {
        (g.x, g.y)
    };
    Some(FeatureFrame {
        gx,
        gy,
        ratio: gaze_ratio(b, g, cfg),
    })
}

/// Start frames `0, stride, 2·stride, …` of every full window over `t` frames.
pub fn window_starts(t: usize, sw: usize, stride: usize) -> Vec<usize> {
    assert!(sw >= 1 && stride >= 1, "sw and stride must be positive");
    if t < sw {
        return Vec::new();
    }
    (0..=(t - sw) / stride).map(|i| i * stride).collect()
}

/// Per-frame features of one track against the aligned gaze sequence.
pub fn track_features(
    track: &ObjectTrack,
    gaze: &[AlignedGaze],
    geometry: &SceneGeometry,
    cfg: &FeatureConfig,
) -> Vec<Option<FeatureFrame>> {
    track
        .boxes
        .iter()
        .zip(gaze)
        .map(|(b, g)| feature_frame(b.as_ref(), g, geometry, cfg))
        .collect()
}

/// Cut fixed-length windows; any window touching an absent frame is dropped.
pub fn cut_windows(
    track: &ObjectTrack,
    gaze: &[AlignedGaze],
    geometry: &SceneGeometry,
    cfg: &FeatureConfig,
) -> Vec<FeatureWindow> {
    let frames = track_features(track, gaze, geometry, cfg);
    windows_from_frames(&track.object_id, &frames, cfg.sw, cfg.stride)
}

pub fn windows_from_frames(
    object_id: &str,
    frames: &[Option<FeatureFrame>],
    sw: usize,
    stride: usize,
) -> Vec<FeatureWindow> {
    window_starts(frames.len(), sw, stride)
        .into_iter()
        .filter_map(|start| {
            let values: Option<Vec<_>> = frames[start..start + sw]
                .iter()
                .map(|f| f.map(FeatureFrame::to_array))
                .collect();
            values.map(|values| FeatureWindow {
                object_id: object_id.to_string(),
                start_frame: start,
                values,
                label: None,
            })
        })
        .collect()
}

/// 1 when at least half of the window's frames carry an intent mark.
pub fn label_window(marks: &[Option<bool>]) -> Result<u8, FeatureError> {
    if marks.is_empty() {
        return Err(FeatureError::EmptyWindow);
    }
    let mut positive = 0usize;
    for (i, m) in marks.iter().enumerate() {
        match m {
            Some(true) => positive += 1,
            Some(false) => {}
            None => return Err(FeatureError::MissingMark(i)),
        }
    }
    Ok(u8::from(2 * positive >= marks.len()))
}

/// Network input: `bs × sw × NUM_FEATURES`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub bs: usize,
    pub sw: usize,
    pub values: Vec<f64>,
    pub labels: Option<Vec<f64>>,
}

impl WindowBatch {
    pub fn from_values(
        bs: usize,
        sw: usize,
        values: Vec<f64>,
        labels: Option<Vec<f64>>,
    ) -> Result<Self, FeatureError> {
        if bs == 0 || sw == 0 {
            return Err(FeatureError::Shape("batch needs bs ≥ 1 and sw ≥ 1".into()));
        }
        if values.len() != bs * sw * NUM_FEATURES {
            return Err(FeatureError::Shape(format!(
                "{} values for {bs}×{sw}×{NUM_FEATURES}",
                values.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != bs {
                return Err(FeatureError::Shape(format!("{} labels for bs {bs}", l.len())));
            }
        }
        Ok(Self {
            bs,
            sw,
            values,
            labels,
        })
    }

    /// Stack windows; labels are attached only if every window has one.
    pub fn from_windows<'a>(
        windows: impl IntoIterator<Item = &'a FeatureWindow>,
    ) -> Result<Self, FeatureError> {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut all_labeled = true;
        let mut sw = None;
        let mut bs = 0;
        for w in windows {
            match sw {
                None => sw = Some(w.values.len()),
                Some(s) if s != w.values.len() => {
                    return Err(FeatureError::Shape(format!(
                        "window length {} differs from {s}",
                        w.values.len()
                    )))
                }
                _ => {}
            }
            for row in &w.values {
                values.extend_from_slice(row);
            }
            match w.label {
                Some(l) => labels.push(f64::from(l)),
                None => all_labeled = false,
            }
            bs += 1;
        }
        let sw = sw.ok_or_else(|| FeatureError::Shape("no windows".into()))?;
        Self::from_values(bs, sw, values, all_labeled.then_some(labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_diagonal_examples() {
        assert!((half_diagonal(&BBox::new(100.0, 100.0, 300.0, 200.0)) - 111.8034).abs() < 1e-4);
        assert!((half_diagonal(&BBox::new(0.0, 0.0, 10.0, 10.0)) - 7.0711).abs() < 1e-4);
        assert!((half_diagonal(&BBox::new(0.0, 0.0, 2.0, 2.0)) - 1.41421).abs() < 1e-5);
    }

    #[test]
    fn ratio_examples() {
        let cfg = FeatureConfig::default();
        let b = BBox::new(100.0, 100.0, 300.0, 200.0);
        assert!((gaze_ratio(&b, Point::new(260.0, 230.0), &cfg) - 1.11803).abs() < 1e-5);
        assert_eq!(gaze_ratio(&b, b.center(), &cfg), 10.0);
        let small = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!((gaze_ratio(&small, Point::new(1005.0, 5.0), &cfg) - 0.0070711).abs() < 1e-7);
    }

    #[test]
    fn window_count_examples() {
        let s = window_starts(100, 30, 10);
        assert_eq!(s.len(), 8);
        assert_eq!(s, vec![0, 10, 20, 30, 40, 50, 60, 70]);
        assert_eq!(window_starts(30, 30, 10), vec![0]);
        assert!(window_starts(29, 30, 10).is_empty());
    }

    #[test]
    fn windows_with_absent_frames_are_dropped() {
        let f = Some(FeatureFrame {
            gx: 0.5,
            gy: 0.5,
            ratio: 1.0,
        });
        let mut frames = vec![f; 50];
        frames[12] = None;
        let w = windows_from_frames("cup", &frames, 10, 5);
        let starts: Vec<_> = w.iter().map(|w| w.start_frame).collect();
        assert_eq!(starts, vec![0, 15, 20, 25, 30, 35, 40]);
    }

    #[test]
    fn label_rule() {
        let marks = |n: usize| -> Vec<Option<bool>> { (0..30).map(|i| Some(i < n)).collect() };
        assert_eq!(label_window(&marks(20)), Ok(1));
        assert_eq!(label_window(&marks(0)), Ok(0));
        assert_eq!(label_window(&marks(15)), Ok(1));
        assert_eq!(label_window(&marks(14)), Ok(0));
        let mut m = marks(10);
        m[3] = None;
        assert_eq!(label_window(&m), Err(FeatureError::MissingMark(3)));
    }

    #[test]
    fn raw_pixel_mode() {
        let geom = SceneGeometry::default();
        let b = BBox::new(0.0, 0.0, 100.0, 100.0);
        let g = AlignedGaze {
            point: Some(Point::new(544.0, 270.0)),
            observed: true,
        };
        let norm = feature_frame(Some(&b), &g, &geom, &FeatureConfig::default()).unwrap();
        assert_eq!((norm.gx, norm.gy), (0.5, 0.25));
        let raw_cfg = FeatureConfig {
            normalize_gaze: false,
            ..FeatureConfig::default()
        };
        let raw = feature_frame(Some(&b), &g, &geom, &raw_cfg).unwrap();
        assert_eq!((raw.gx, raw.gy), (544.0, 270.0));
        assert_eq!(feature_frame(None, &g, &geom, &raw_cfg), None);
        assert_eq!(feature_frame(Some(&b), &AlignedGaze::ABSENT, &geom, &raw_cfg), None);
    }

    #[test]
    fn batch_shape_checks() {
        assert!(WindowBatch::from_values(1, 2, vec![0.0; 6], None).is_ok());
        assert!(WindowBatch::from_values(1, 2, vec![0.0; 5], None).is_err());
        assert!(WindowBatch::from_values(0, 2, vec![], None).is_err());
    }
}
