//! Parametric synthetic gaze dataset.
//!
//! Each trial places a few objects on the scene grid and scripts gaze either as
//! deliberate, ordered fixations on target objects or as unconscious scanning
//! over object peripheries and empty space. Frames are marked with the target
//! object exactly while every gaze sample of the frame belongs to a scripted
//! target fixation (blinks inside a fixation included).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::features::half_diagonal;
use crate::perception::{
    align_gaze_to_frames, ingest_detection_stream, ingest_gaze_stream, BBox, Detection, FrameRecord,
    GazeSample, Point, SceneGeometry, WireFrame, FRAME_PERIOD_US, GAZE_PERIOD_US,
};
use crate::planner::cell_box;

pub const OBJECT_POOL: [&str; 9] = [
    "kettle", "cup", "banana", "bowl", "plant", "switch", "apple", "box", "bottle",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub seed: u64,
    pub n_subjects: usize,
    pub repetitions: usize,
    pub objects_per_trial: usize,
    pub trial_ms: f64,
    /// Fixation jitter standard deviation, truncated at three sigma.
    pub sigma_px: f64,
    pub intent_fixation_ms: (f64, f64),
    pub fixations_per_target: (usize, usize),
    pub glance_ms: (f64, f64),
    pub saccade_ms: (f64, f64),
    pub scan_fixation_ms: (f64, f64),
    pub lead_in_ms: (f64, f64),
    /// Chance that a glance between target fixations lands on another object.
    pub distractor_glance_prob: f64,
    /// Chance that a scanning fixation lands on an object periphery rather than
    /// empty space.
    pub periphery_prob: f64,
    pub blink_prob: f64,
    pub blink_ms: (f64, f64),
    pub subject_sigma_mult: (f64, f64),
    pub subject_duration_mult: (f64, f64),
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            seed: 42,
            n_subjects: 8,
            repetitions: 5,
            objects_per_trial: 3,
            trial_ms: 8000.0,
            sigma_px: 15.0,
            intent_fixation_ms: (300.0, 900.0),
            fixations_per_target: (2, 4),
            glance_ms: (80.0, 200.0),
            saccade_ms: (50.0, 100.0),
            scan_fixation_ms: (200.0, 700.0),
            lead_in_ms: (600.0, 1500.0),
            distractor_glance_prob: 0.5,
            periphery_prob: 0.7,
            blink_prob: 0.4,
            blink_ms: (100.0, 200.0),
            subject_sigma_mult: (0.8, 1.25),
            subject_duration_mult: (0.85, 1.15),
        }
    }
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ranges = [
            self.intent_fixation_ms,
            self.glance_ms,
            self.saccade_ms,
            self.scan_fixation_ms,
            self.lead_in_ms,
            self.blink_ms,
            self.subject_sigma_mult,
            self.subject_duration_mult,
        ];
        if self.sigma_px <= 0.0 || ranges.iter().any(|&(a, b)| !(a > 0.0 && a <= b)) {
            return Err(EvalError::Config("durations and sigma must be positive ranges".into()));
        }
        if self.objects_per_trial == 0 || self.objects_per_trial > 12 {
            return Err(EvalError::Config("objects_per_trial must be in 1..=12".into()));
        }
        if self.n_subjects == 0 || self.repetitions == 0 {
            return Err(EvalError::Config("need at least one subject and repetition".into()));
        }
        Ok(())
    }

    /// Trials per subject: one intent and one scanning trial per repetition.
    pub fn trials_per_subject(&self) -> usize {
        2 * self.repetitions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Intent,
    Unconscious,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Intent => "intent",
            TaskKind::Unconscious => "unconscious",
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub subject_id: String,
    pub trial_id: String,
    pub task: TaskKind,
    pub repetition: usize,
    pub targets: Vec<String>,
    /// Subject-scaled fixation jitter.
    pub sigma_px: f64,
    pub geometry: SceneGeometry,
    pub seed: u64,
}

/// One line of `marks.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkRecord {
    pub frame_idx: i64,
    pub intent_object: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub meta: TrialMeta,
    pub gaze: Vec<GazeSample>,
    pub frames: Vec<FrameRecord>,
    /// Per frame, the object the user intends, if any.
    pub marks: Vec<Option<String>>,
}

impl Trial {
    pub fn frame_times(&self) -> Vec<i64> {
        self.frames.iter().map(|f| f.t_us).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub profile: Option<SyntheticProfile>,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.trials.iter().map(|t| t.meta.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

/// 2D normal offset with the radius truncated at `3σ` by rejection.
pub(super) fn jitter(rng: &mut ChaCha8Rng, sigma: f64) -> (f64, f64) {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt() * sigma;
        let (dx, dy) = (r * (std::f64::consts::TAU * u2).cos(), r * (std::f64::consts::TAU * u2).sin());
        if dx.hypot(dy) <= 3.0 * sigma {
            return (dx, dy);
        }
    }
}

#[derive(Debug, Clone)]
enum Segment {
    Fixation {
        at: Point,
        sigma: f64,
        dur_us: i64,
        target: Option<usize>,
        /// Offset and length of an off-screen blink inside the fixation.
        blink: Option<(i64, i64)>,
    },
    Saccade {
        from: Point,
        to: Point,
        dur_us: i64,
    },
}

impl Segment {
    fn dur(&self) -> i64 {
        match self {
            Segment::Fixation { dur_us, .. } | Segment::Saccade { dur_us, .. } => *dur_us,
        }
    }
}

struct Scene {
    labels: Vec<String>,
    boxes: Vec<BBox>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let mut labels: Vec<&str> = OBJECT_POOL.to_vec();
        labels.shuffle(rng);
        let mut cells: Vec<(i32, i32)> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        cells.shuffle(rng);
        let boxes = cells[..n]
            .iter()
            .map(|&cell| {
                let b = cell_box(cell);
                let s = rng.gen_range(0.85..1.15);
                let c = b.center();
                let (hw, hh) = (b.width() * s / 2.0, b.height() * s / 2.0);
                BBox::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh)
            })
            .collect();
        Self {
            labels: labels[..n].iter().map(|s| s.to_string()).collect(),
            boxes,
        }
    }

    fn periphery(&self, rng: &mut ChaCha8Rng, i: usize) -> Point {
        let b = &self.boxes[i];
        let c = b.center();
        let r = rng.gen_range(0.8..1.05) * half_diagonal(b);
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        Point::new(c.x + r * a.cos(), c.y + r * a.sin())
    }

    fn empty_point(&self, rng: &mut ChaCha8Rng, g: &SceneGeometry) -> Point {
        for _ in 0..1000 {
            let p = Point::new(rng.gen_range(60.0..g.width() - 60.0), rng.gen_range(60.0..g.height() - 60.0));
            let clear = self
                .boxes
                .iter()
                .all(|b| b.center().dist(p) > 1.3 * half_diagonal(b) && !b.expanded(40.0).contains(p));
            if clear {
                return p;
            }
        }
        Point::new(g.width() - 40.0, 40.0)
    }
}

struct Script {
    segments: Vec<Segment>,
    pos: Point,
    total_us: i64,
}

impl Script {
    fn new(start: Point) -> Self {
        Self {
            segments: Vec::new(),
            pos: start,
            total_us: 0,
        }
    }

    fn push(&mut self, s: Segment) {
        self.total_us += s.dur();
        self.segments.push(s);
    }

    fn move_to(&mut self, to: Point, dur_us: i64) {
        let from = self.pos;
        self.push(Segment::Saccade { from, to, dur_us });
        self.pos = to;
    }

    fn fixate(&mut self, at: Point, sigma: f64, dur_us: i64, target: Option<usize>, blink: Option<(i64, i64)>) {
        self.pos = at;
        self.push(Segment::Fixation {
            at,
            sigma,
            dur_us,
            target,
            blink,
        });
    }
}

struct SubjectTraits {
    sigma: f64,
    dur_mult: f64,
}

fn ms(x: f64) -> i64 {
    (x * 1000.0).round() as i64
}

fn scan(script: &mut Script, rng: &mut ChaCha8Rng, scene: &Scene, p: &SyntheticProfile, s: &SubjectTraits, g: &SceneGeometry, until_us: i64) {
    while script.total_us < until_us {
        let to = if rng.gen_bool(p.periphery_prob) {
            let i = rng.gen_range(0..scene.boxes.len());
            scene.periphery(rng, i)
        } else {
            scene.empty_point(rng, g)
        };
        script.move_to(to, ms(uniform(rng, p.saccade_ms)));
        script.fixate(to, s.sigma, ms(uniform(rng, p.scan_fixation_ms) * s.dur_mult), None, None);
    }
}

fn script_trial(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    task: TaskKind,
    p: &SyntheticProfile,
    s: &SubjectTraits,
    g: &SceneGeometry,
) -> (Script, Vec<String>) {
    let start = scene.empty_point(rng, g);
    let mut script = Script::new(start);
    let trial_us = ms(p.trial_ms);
    match task {
        TaskKind::Unconscious => {
            scan(&mut script, rng, scene, p, s, g, trial_us);
            (script, Vec::new())
        }
        TaskKind::Intent => {
            let n_targets = if scene.labels.len() >= 2 && rng.gen_bool(0.5) { 2 } else { 1 };
            let mut order: Vec<usize> = (0..scene.labels.len()).collect();
            order.shuffle(rng);
            let targets = order[..n_targets].to_vec();
            let lead_in = ms(uniform(rng, p.lead_in_ms));
            scan(&mut script, rng, scene, p, s, g, lead_in);
            for &t in &targets {
                let centre = scene.boxes[t].center();
                let n_fix = rng.gen_range(p.fixations_per_target.0..=p.fixations_per_target.1);
                for k in 0..n_fix {
                    script.move_to(centre, ms(uniform(rng, p.saccade_ms)));
                    let dur = ms(uniform(rng, p.intent_fixation_ms) * s.dur_mult);
                    let blink_len = ms(uniform(rng, p.blink_ms));
                    let blink = (rng.gen_bool(p.blink_prob) && dur >= blink_len + ms(200.0)).then(|| {
                        let off = rng.gen_range(ms(100.0)..=dur - blink_len - ms(100.0));
                        (off, blink_len)
                    });
                    script.fixate(centre, s.sigma, dur, Some(t), blink);
                    if k + 1 < n_fix {
                        let others: Vec<usize> = (0..scene.boxes.len()).filter(|&i| i != t).collect();
                        let to = if !others.is_empty() && rng.gen_bool(p.distractor_glance_prob) {
                            let other = *others.choose(rng).expect("non-empty");
                            scene.periphery(rng, other)
                        } else {
                            scene.empty_point(rng, g)
                        };
                        script.move_to(to, ms(uniform(rng, p.saccade_ms)));
                        script.fixate(to, s.sigma, ms(uniform(rng, p.glance_ms)), None, None);
                    }
                }
            }
            let tail = (script.total_us + ms(800.0)).max(trial_us);
            scan(&mut script, rng, scene, p, s, g, tail);
            (script, targets.iter().map(|&t| scene.labels[t].clone()).collect())
        }
    }
}

/// Sample the script at the gaze clock. Each sample carries the target it
/// belongs to.
fn render(script: &Script, rng: &mut ChaCha8Rng, g: &SceneGeometry) -> Vec<(GazeSample, Option<usize>)> {
    let mut out = Vec::new();
    let mut seg_start = 0i64;
    let mut idx = 0usize;
    let mut t = 0i64;
    while t < script.total_us {
        while seg_start + script.segments[idx].dur() <= t {
            seg_start += script.segments[idx].dur();
            idx += 1;
        }
        let local = t - seg_start;
        let (sample, tag) = match &script.segments[idx] {
            Segment::Fixation {
                at,
                sigma,
                target,
                blink,
                ..
            } => {
                let blinking = blink.is_some_and(|(o, l)| local >= o && local < o + l);
                if blinking {
                    (GazeSample::off_screen(t), *target)
                } else {
                    let (dx, dy) = jitter(rng, *sigma);
                    (GazeSample::new(t, at.x + dx, at.y + dy), *target)
                }
            }
            Segment::Saccade { from, to, dur_us } => {
                let a = local as f64 / *dur_us as f64;
                (
                    GazeSample::new(t, from.x + a * (to.x - from.x), from.y + a * (to.y - from.y)),
                    None,
                )
            }
        };
        let sample = if sample.on_screen && !g.contains(sample.gx, sample.gy) {
            GazeSample::off_screen(t)
        } else {
            sample
        };
        out.push((sample, tag));
        t += GAZE_PERIOD_US;
    }
    out
}

fn trial_seed(seed: u64, subject: usize, rep: usize, task: TaskKind) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((subject as u64) << 32)
        ^ ((rep as u64) << 8)
        ^ task as u64
}

pub fn generate_trial(
    profile: &SyntheticProfile,
    subject: usize,
    rep: usize,
    task: TaskKind,
    geometry: &SceneGeometry,
) -> Trial {
    let mut srng = ChaCha8Rng::seed_from_u64(profile.seed ^ (0xA5A5_0000 + subject as u64));
    let traits = SubjectTraits {
        sigma: profile.sigma_px * uniform(&mut srng, profile.subject_sigma_mult),
        dur_mult: uniform(&mut srng, profile.subject_duration_mult),
    };
    let seed = trial_seed(profile.seed, subject, rep, task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, profile.objects_per_trial.min(OBJECT_POOL.len()));
    let (script, targets) = script_trial(&mut rng, &scene, task, profile, &traits, geometry);
    let tagged = render(&script, &mut rng, geometry);

    let n_frames = (script.total_us / FRAME_PERIOD_US) as usize;
    let detections: Vec<Detection> = scene
        .labels
        .iter()
        .zip(&scene.boxes)
        .map(|(l, b)| Detection {
            object_id: l.clone(),
            label: l.clone(),
            bbox: *b,
        })
        .collect();
    let mut frames = Vec::with_capacity(n_frames);
    let mut marks = Vec::with_capacity(n_frames);
    let mut cursor = 0usize;
    for f in 0..n_frames {
        let (t0, t1) = (f as i64 * FRAME_PERIOD_US, (f as i64 + 1) * FRAME_PERIOD_US);
        while cursor < tagged.len() && tagged[cursor].0.t_us < t0 {
            cursor += 1;
        }
        let mut tags = tagged[cursor..].iter().take_while(|(s, _)| s.t_us < t1).map(|(_, t)| *t);
        let first = tags.next().flatten();
        let mark = first.filter(|&o| tags.all(|t| t == Some(o)));
        marks.push(mark.map(|o| scene.labels[o].clone()));
        frames.push(FrameRecord {
            frame_idx: f as i64,
            t_us: t0,
            gaze: None,
            detections: detections.clone(),
        });
    }
    Trial {
        meta: TrialMeta {
            subject_id: format!("s{:02}", subject + 1),
            trial_id: format!("{}-r{}", task.name(), rep + 1),
            task,
            repetition: rep,
            targets,
            sigma_px: traits.sigma,
            geometry: *geometry,
            seed,
        },
        gaze: tagged.into_iter().map(|(s, _)| s).collect(),
        frames,
        marks,
    }
}

/// Subjects × repetitions × {intent, unconscious}. Deterministic per seed.
pub fn generate_dataset(profile: &SyntheticProfile) -> Result<Dataset, EvalError> {
    profile.validate()?;
    let geometry = SceneGeometry::default();
    let mut trials = Vec::new();
    for subject in 0..profile.n_subjects {
        for rep in 0..profile.repetitions {
            for task in [TaskKind::Intent, TaskKind::Unconscious] {
                trials.push(generate_trial(profile, subject, rep, task, &geometry));
            }
        }
    }
    Ok(Dataset {
        profile: Some(profile.clone()),
        trials,
    })
}

/// Every intent-marked frame's aligned gaze lies within three jitter sigmas of the
/// marked object's box center.
pub fn check_mark_geometry(trial: &Trial) -> Result<(), String> {
    let aligned = align_gaze_to_frames(&trial.gaze, &trial.frame_times()).map_err(|e| e.to_string())?;
    let limit = 3.0 * trial.meta.sigma_px + 1e-9;
    for (f, mark) in trial.marks.iter().enumerate() {
        let Some(obj) = mark else { continue };
        let det = trial.frames[f]
            .detections
            .iter()
            .find(|d| &d.object_id == obj)
            .ok_or_else(|| format!("frame {f}: marked object {obj} not detected"))?;
        let p = aligned[f]
            .point
            .ok_or_else(|| format!("frame {f}: marked frame without gaze"))?;
        let d = det.bbox.center().dist(p);
        if d > limit {
            return Err(format!("frame {f}: gaze {d:.1} px from {obj} center exceeds {limit:.1}"));
        }
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn trial_dir(root: &Path, meta: &TrialMeta) -> std::path::PathBuf {
    root.join("subjects").join(&meta.subject_id).join("trials").join(&meta.trial_id)
}

/// Write `subjects/<sid>/trials/<tid>/{gaze.jsonl, frames.jsonl, marks.jsonl, meta.json}`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<(), EvalError> {
    for t in &ds.trials {
        let dir = trial_dir(root, &t.meta);
        fs::create_dir_all(&dir)?;
        write_jsonl(&dir.join("gaze.jsonl"), &t.gaze)?;
        write_jsonl(&dir.join("frames.jsonl"), t.frames.iter().map(WireFrame::from))?;
        write_jsonl(
            &dir.join("marks.jsonl"),
            t.marks.iter().enumerate().map(|(i, m)| MarkRecord {
                frame_idx: t.frames[i].frame_idx,
                intent_object: m.clone(),
            }),
        )?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&t.meta)? + "\n")?;
    }
    if let Some(p) = &ds.profile {
        fs::write(root.join("profile.json"), serde_json::to_string_pretty(p)? + "\n")?;
    }
    Ok(())
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let mut v: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

pub fn load_trial(dir: &Path) -> Result<Trial, EvalError> {
    let ctx = |e: &dyn std::fmt::Display| EvalError::Data(format!("{}: {e}", dir.display()));
    let meta: TrialMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?).map_err(|e| ctx(&e))?;
    let gaze = ingest_gaze_stream(BufReader::new(fs::File::open(dir.join("gaze.jsonl"))?)).map_err(|e| ctx(&e))?;
    let frames =
        ingest_detection_stream(BufReader::new(fs::File::open(dir.join("frames.jsonl"))?)).map_err(|e| ctx(&e))?;
    let mut marks = Vec::with_capacity(frames.len());
    for (i, line) in fs::read_to_string(dir.join("marks.jsonl"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: MarkRecord = serde_json::from_str(line).map_err(|e| ctx(&format!("marks line {}: {e}", i + 1)))?;
        marks.push(m.intent_object);
    }
    if marks.len() != frames.len() {
        return Err(ctx(&format!("{} marks for {} frames", marks.len(), frames.len())));
    }
    Ok(Trial {
        meta,
        gaze,
        frames,
        marks,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset, EvalError> {
    let subjects = root.join("subjects");
    if !subjects.is_dir() {
        return Err(EvalError::Data(format!("{} has no subjects/ directory", root.display())));
    }
    let mut trials = Vec::new();
    for s in sorted_dirs(&subjects)? {
        for t in sorted_dirs(&s.join("trials"))? {
            trials.push(load_trial(&t)?);
        }
    }
    let profile = fs::read_to_string(root.join("profile.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let mut by_key: BTreeMap<(String, usize, TaskKind), Trial> = BTreeMap::new();
    for t in trials {
        by_key.insert((t.meta.subject_id.clone(), t.meta.repetition, t.meta.task), t);
    }
    Ok(Dataset {
        profile,
        trials: by_key.into_values().collect(),
    })
}
