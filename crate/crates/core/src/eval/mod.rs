//! Evaluation: synthetic data, the fixation baseline, cross-validation and
//! stage-gated system runs.

mod synth;
mod system;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{cut_windows, label_window, FeatureConfig, FeatureWindow, WindowBatch};
use crate::intent_net::{predict_all, train, ModelConfig, ModelParams, NetError, TrainConfig};
use crate::session::IntentModel;
use crate::perception::{align_gaze_to_frames, track_objects, AlignedGaze, BBox, ObjectTrack, FRAME_PERIOD_US};

pub use synth::{
    check_mark_geometry, generate_dataset, generate_trial, load_dataset, load_trial, trial_dir, write_dataset,
    Dataset, MarkRecord, SyntheticProfile, TaskKind, Trial, TrialMeta, OBJECT_POOL,
};
pub use system::{
    default_system_sessions, run_system_eval, run_system_session, scripted_gaze, FamilyRow, ScriptedSession,
    SessionResult, StageCount, StageReport, WorldPredicate, injected_retry_session, pour_water_session,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("split: {0}")]
    Split(String),
    #[error("accuracy of an empty prediction set")]
    Empty,
    #[error("length mismatch: {0} predictions, {1} labels")]
    Length(usize, usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Length(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub dwell_ms: f64,
    pub margin_px: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            dwell_ms: 500.0,
            margin_px: 20.0,
        }
    }
}

impl BaselineConfig {
    /// Consecutive frames needed to span `dwell_ms` at the 30 Hz frame clock.
    pub fn dwell_frames(&self) -> usize {
        (self.dwell_ms * 30.0 / 1000.0 - 1e-9).ceil().max(1.0) as usize
    }
}

/// Dwell trigger over one window: true iff some run of consecutive frames with
/// observed gaze inside the margin-expanded box lasts at least the dwell time.
/// Frames without a fresh gaze sample break the run.
pub fn fixation_dwell(boxes: &[Option<BBox>], gaze: &[AlignedGaze], cfg: &BaselineConfig) -> bool {
    let need = cfg.dwell_frames();
    let mut run = 0usize;
    for (b, g) in boxes.iter().zip(gaze) {
        let inside = match (b, g.point) {
            (Some(b), Some(p)) if g.observed => b.expanded(cfg.margin_px).contains(p),
            _ => false,
        };
        run = if inside { run + 1 } else { 0 };
        if run >= need {
            return true;
        }
    }
    false
}

/// Baseline decision for every window start of a track.
pub fn fixation_baseline(
    track: &ObjectTrack,
    gaze: &[AlignedGaze],
    cfg: &BaselineConfig,
    sw: usize,
    stride: usize,
) -> Vec<(usize, bool)> {
    let t = track.boxes.len().min(gaze.len());
    crate::features::window_starts(t, sw, stride)
        .into_iter()
        .map(|s| (s, fixation_dwell(&track.boxes[s..s + sw], &gaze[s..s + sw], cfg)))
        .collect()
}

/// A labeled window with its origin and the baseline's decision.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    pub trial: usize,
    pub subject_id: String,
    pub window: FeatureWindow,
    pub label: bool,
    pub baseline: bool,
}

/// Windows of every object of a trial, labeled from the frame marks.
pub fn trial_windows(
    trial: &Trial,
    trial_index: usize,
    features: &FeatureConfig,
    baseline: &BaselineConfig,
) -> Result<Vec<EvalWindow>, EvalError> {
    let aligned = align_gaze_to_frames(&trial.gaze, &trial.frame_times()).map_err(|e| EvalError::Data(e.to_string()))?;
    let geometry = trial.meta.geometry;
    let mut out = Vec::new();
    for track in track_objects(&trial.frames).values() {
        let base: BTreeMap<usize, bool> =
            fixation_baseline(track, &aligned, baseline, features.sw, features.stride).into_iter().collect();
        for mut w in cut_windows(track, &aligned, &geometry, features) {
            let marks: Vec<Option<bool>> = trial.marks[w.start_frame..w.start_frame + features.sw]
                .iter()
                .map(|m| Some(m.as_deref() == Some(track.object_id.as_str())))
                .collect();
            let y = label_window(&marks).map_err(|e| EvalError::Data(e.to_string()))?;
            w.label = Some(y);
            out.push(EvalWindow {
                trial: trial_index,
                subject_id: trial.meta.subject_id.clone(),
                baseline: base[&w.start_frame],
                label: y == 1,
                window: w,
            });
        }
    }
    Ok(out)
}

pub fn dataset_windows(
    ds: &Dataset,
    features: &FeatureConfig,
    baseline: &BaselineConfig,
) -> Result<Vec<EvalWindow>, EvalError> {
    let mut out = Vec::new();
    for (i, t) in ds.trials.iter().enumerate() {
        out.extend(trial_windows(t, i, features, baseline)?);
    }
    Ok(out)
}

/// Train/test partition of trial indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `i` holds out repetition `i mod 5` of every subject and task.
pub fn five_fold_by_trial(ds: &Dataset) -> Result<Vec<Split>, EvalError> {
    let mut reps: BTreeMap<(&str, TaskKind), BTreeSet<usize>> = BTreeMap::new();
    for t in &ds.trials {
        reps.entry((&t.meta.subject_id, t.meta.task)).or_default().insert(t.meta.repetition);
    }
    if reps.is_empty() {
        return Err(EvalError::Split("empty dataset".into()));
    }
    if let Some(((s, task), r)) = reps.iter().find(|(_, r)| r.len() < 5) {
        return Err(EvalError::Split(format!(
            "{s}/{} has {} repetitions, five-fold needs 5",
            task.name(),
            r.len()
        )));
    }
    let splits = (0..5)
        .map(|fold| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..ds.trials.len()).partition(|&i| ds.trials[i].meta.repetition % 5 == fold);
            Split {
                name: format!("fold{}", fold + 1),
                train,
                test,
            }
        })
        .collect();
    Ok(splits)
}

/// One split per subject with that subject's trials held out.
pub fn loso(ds: &Dataset) -> Result<Vec<Split>, EvalError> {
    let subjects = ds.subjects();
    if subjects.len() < 2 {
        return Err(EvalError::Split(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|s| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..ds.trials.len()).partition(|&i| ds.trials[i].meta.subject_id == s);
            Split { name: s, train, test }
        })
        .collect())
}

/// Each split must divide `0..n` into disjoint train and test sets; the test sets
/// together must cover every trial exactly once.
pub fn check_partition(splits: &[Split], n: usize) -> Result<(), EvalError> {
    let mut covered = vec![0usize; n];
    for s in splits {
        let train: BTreeSet<usize> = s.train.iter().copied().collect();
        let test: BTreeSet<usize> = s.test.iter().copied().collect();
        if train.len() != s.train.len() || test.len() != s.test.len() {
            return Err(EvalError::Split(format!("{}: duplicate trial index", s.name)));
        }
        if let Some(i) = train.intersection(&test).next() {
            return Err(EvalError::Split(format!("{}: trial {i} in both train and test", s.name)));
        }
        if train.len() + test.len() != n || train.iter().chain(&test).any(|&i| i >= n) {
            return Err(EvalError::Split(format!("{}: does not cover all {n} trials", s.name)));
        }
        for &i in &test {
            covered[i] += 1;
        }
    }
    if let Some(i) = covered.iter().position(|&c| c != 1) {
        return Err(EvalError::Split(format!("trial {i} is tested {} times", covered[i])));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    Fivefold,
    Loso,
}

impl std::str::FromStr for CvMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fivefold" => Ok(CvMode::Fivefold),
            "loso" => Ok(CvMode::Loso),
            other => Err(EvalError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub features: FeatureConfig,
    pub baseline: BaselineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            baseline: BaselineConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub name: String,
    pub train_windows: usize,
    pub test_windows: usize,
    pub network_accuracy: f64,
    pub baseline_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub mode: CvMode,
    pub folds: Vec<FoldResult>,
    pub network_mean: f64,
    pub network_std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub seconds: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn to_batch(windows: &[&EvalWindow]) -> Result<WindowBatch, EvalError> {
    WindowBatch::from_windows(windows.iter().map(|w| &w.window)).map_err(|e| EvalError::Data(e.to_string()))
}

/// Train on the split's training windows and score both methods on its test
/// windows. Fails if any test window comes from a training trial.
pub fn run_split(
    windows: &[EvalWindow],
    split: &Split,
    cfg: &EvalConfig,
) -> Result<(FoldResult, ModelParams), EvalError> {
    let train_set: BTreeSet<usize> = split.train.iter().copied().collect();
    let test_set: BTreeSet<usize> = split.test.iter().copied().collect();
    let train_w: Vec<&EvalWindow> = windows.iter().filter(|w| train_set.contains(&w.trial)).collect();
    let test_w: Vec<&EvalWindow> = windows.iter().filter(|w| test_set.contains(&w.trial)).collect();
    if test_w.iter().any(|w| train_set.contains(&w.trial)) {
        return Err(EvalError::Split(format!("{}: test window from a training trial", split.name)));
    }
    if test_w.is_empty() || train_w.is_empty() {
        return Err(EvalError::Split(format!("{}: empty train or test windows", split.name)));
    }
    let (params, _) = train(&to_batch(&train_w)?, &cfg.train, &cfg.model)?;
    let probs = predict_all(&params, &cfg.model, &to_batch(&test_w)?, 256)?;
    let labels: Vec<bool> = test_w.iter().map(|w| w.label).collect();
    let net: Vec<bool> = probs.iter().map(|p| *p > 0.5).collect();
    let base: Vec<bool> = test_w.iter().map(|w| w.baseline).collect();
    Ok((
        FoldResult {
            name: split.name.clone(),
            train_windows: train_w.len(),
            test_windows: test_w.len(),
            network_accuracy: accuracy(&net, &labels)?,
            baseline_accuracy: accuracy(&base, &labels)?,
        },
        params,
    ))
}

pub fn run_cv(ds: &Dataset, mode: CvMode, cfg: &EvalConfig) -> Result<CvReport, EvalError> {
    let started = Instant::now();
    let splits = match mode {
        CvMode::Fivefold => five_fold_by_trial(ds)?,
        CvMode::Loso => loso(ds)?,
    };
    check_partition(&splits, ds.trials.len())?;
    if mode == CvMode::Loso {
        for s in &splits {
            if s.train.iter().any(|&i| ds.trials[i].meta.subject_id == s.name) {
                return Err(EvalError::Split(format!("test subject {} appears in training", s.name)));
            }
        }
    }
    let windows = dataset_windows(ds, &cfg.features, &cfg.baseline)?;
    let mut folds = Vec::with_capacity(splits.len());
    for split in &splits {
        let (fold, _) = run_split(&windows, split, cfg)?;
        tracing::info!(
            fold = %fold.name,
            network = fold.network_accuracy,
            baseline = fold.baseline_accuracy,
            "fold done"
        );
        folds.push(fold);
    }
    let net: Vec<f64> = folds.iter().map(|f| f.network_accuracy).collect();
    let base: Vec<f64> = folds.iter().map(|f| f.baseline_accuracy).collect();
    let (network_mean, network_std) = mean_std(&net);
    let (baseline_mean, baseline_std) = mean_std(&base);
    Ok(CvReport {
        mode,
        folds,
        network_mean,
        network_std,
        baseline_mean,
        baseline_std,
        seconds: started.elapsed().as_secs_f64(),
    })
}

impl CvReport {
    /// Aligned text table: method accuracies, then one row per fold.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let label = match self.mode {
            CvMode::Fivefold => "five-fold by trial",
            CvMode::Loso => "leave-one-subject-out",
        };
        let _ = writeln!(s, "Accuracy ({label})");
        let _ = writeln!(s, "{:<22}{:>18}", "Method", "Accuracy");
        let _ = writeln!(
            s,
            "{:<22}{:>18}",
            "Fixation baseline",
            format!("{:.2} ± {:.2}%", 100.0 * self.baseline_mean, 100.0 * self.baseline_std)
        );
        let _ = writeln!(
            s,
            "{:<22}{:>18}",
            "Intent network",
            format!("{:.2} ± {:.2}%", 100.0 * self.network_mean, 100.0 * self.network_std)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10}{:>8}{:>8}{:>12}{:>12}", "Split", "train", "test", "network", "baseline");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<10}{:>8}{:>8}{:>11.2}%{:>11.2}%",
                f.name,
                f.train_windows,
                f.test_windows,
                100.0 * f.network_accuracy,
                100.0 * f.baseline_accuracy
            );
        }
        s
    }
}

/// Train one model on every window of the dataset.
pub fn train_model(ds: &Dataset, cfg: &EvalConfig) -> Result<IntentModel, EvalError> {
    let windows = dataset_windows(ds, &cfg.features, &cfg.baseline)?;
    let refs: Vec<&EvalWindow> = windows.iter().collect();
    if refs.is_empty() {
        return Err(EvalError::Data("dataset yields no windows".into()));
    }
    let (params, _) = train(&to_batch(&refs)?, &cfg.train, &cfg.model)?;
    Ok(IntentModel {
        params,
        config: cfg.model.clone(),
        features: cfg.features.clone(),
    })
}

/// Frame count corresponding to a duration on the 30 Hz clock.
pub fn frames_for_ms(ms: f64) -> usize {
    ((ms * 1000.0) / FRAME_PERIOD_US as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::Point;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, false, true, true], &[true, false, false, true]).unwrap(), 0.75);
        assert_eq!(accuracy(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(accuracy(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(EvalError::Empty)));
    }

    fn seen(p: Option<(f64, f64)>) -> AlignedGaze {
        AlignedGaze {
            point: p.map(|(x, y)| Point::new(x, y)),
            observed: p.is_some(),
        }
    }

    fn run(frames: &[Option<(f64, f64)>]) -> bool {
        let b = BBox::new(100.0, 100.0, 300.0, 200.0);
        let boxes = vec![Some(b); frames.len()];
        let gaze: Vec<AlignedGaze> = frames.iter().map(|p| seen(*p)).collect();
        fixation_dwell(&boxes, &gaze, &BaselineConfig::default())
    }

    #[test]
    fn baseline_examples() {
        let inside = Some((200.0, 150.0));
        // 600 ms at 30 Hz is 18 frames.
        assert!(run(&[inside; 18]));
        // 400 ms + blink + 400 ms.
        let mut broken = vec![inside; 12];
        broken.extend([None; 3]);
        broken.extend([inside; 12]);
        assert!(!run(&broken));
        assert!(!run(&[Some((900.0, 900.0)); 30]));
        // Margin: 15 px outside the box still counts.
        assert!(run(&[Some((315.0, 150.0)); 15]));
        assert_eq!(BaselineConfig::default().dwell_frames(), 15);
    }

    #[test]
    fn carried_gaze_breaks_run() {
        let b = BBox::new(100.0, 100.0, 300.0, 200.0);
        let mut gaze = vec![seen(Some((200.0, 150.0))); 20];
        gaze[10].observed = false;
        assert!(!fixation_dwell(&vec![Some(b); 20], &gaze, &BaselineConfig::default()));
    }

    fn toy_dataset(subjects: usize, reps: usize) -> Dataset {
        let p = SyntheticProfile {
            n_subjects: subjects,
            repetitions: reps,
            trial_ms: 1500.0,
            ..Default::default()
        };
        generate_dataset(&p).unwrap()
    }

    #[test]
    fn fivefold_holds_out_repetitions() {
        let ds = toy_dataset(2, 5);
        let splits = five_fold_by_trial(&ds).unwrap();
        assert_eq!(splits.len(), 5);
        check_partition(&splits, ds.trials.len()).unwrap();
        for (i, s) in splits.iter().enumerate() {
            assert!(s.test.iter().all(|&t| ds.trials[t].meta.repetition == i));
            assert_eq!(s.test.len(), 4);
        }
        assert!(matches!(five_fold_by_trial(&toy_dataset(2, 4)), Err(EvalError::Split(_))));
    }

    #[test]
    fn loso_splits() {
        let ds = toy_dataset(3, 1);
        let splits = loso(&ds).unwrap();
        assert_eq!(splits.len(), 3);
        check_partition(&splits, ds.trials.len()).unwrap();
        for s in &splits {
            assert!(s.train.iter().all(|&t| ds.trials[t].meta.subject_id != s.name));
        }
        assert!(loso(&toy_dataset(1, 1)).is_err());
    }

    #[test]
    fn broken_partition_detected() {
        let splits = vec![Split {
            name: "x".into(),
            train: vec![0, 1],
            test: vec![1, 2],
        }];
        assert!(check_partition(&splits, 3).is_err());
    }

    proptest! {
        #[test]
        fn baseline_matches_run_oracle(bits in prop::collection::vec(prop::option::of(any::<bool>()), 0..60)) {
            let b = BBox::new(100.0, 100.0, 300.0, 200.0);
            let gaze: Vec<AlignedGaze> = bits.iter().map(|x| match x {
                Some(true) => seen(Some((200.0, 150.0))),
                Some(false) => seen(Some((800.0, 800.0))),
                None => AlignedGaze { point: Some(Point::new(200.0, 150.0)), observed: false },
            }).collect();
            let mut best = 0;
            let mut cur = 0;
            for x in &bits {
                cur = if *x == Some(true) { cur + 1 } else { 0 };
                best = best.max(cur);
            }
            prop_assert_eq!(fixation_dwell(&vec![Some(b); bits.len()], &gaze, &BaselineConfig::default()), best >= 15);
        }
    }
}
