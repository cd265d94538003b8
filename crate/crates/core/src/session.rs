//! Session orchestration: gaze and frames in, phase changes and decisions out.
//!
//! A [`SessionMachine`] consumes one ordered input stream. While observing it
//! aligns gaze to frames, scores per-object windows, and debounces positives
//! into the gazed-object sequence. After a quiet period it asks the language
//! model for intentions, runs gaze confirmation, and on agreement plans and
//! executes against its world. Every step is appended to an event log that
//! [`replay`] can fold back into the same trajectory without any client.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confirmation::{
    ConfirmationConfig, ConfirmationLoop, ConfirmationOutcome, ConfirmationState, RegionLayout,
};
use crate::features::{feature_frame, FeatureConfig, FeatureFrame, WindowBatch, NUM_FEATURES};
use crate::inference::{filter_proposals, infer_intentions, GazedObjectSequence, IntentProposal, LlmClient};
use crate::intent_net::{predict_proba, Checkpoint, ModelConfig, ModelParams, NetError, Prediction};
use crate::perception::{
    mock_detect, AlignedGaze, BBox, FrameRecord, GazeSample, Point, SceneGeometry, FRAME_PERIOD_US, TRACK_GAP_FILL,
};
use crate::planner::{execute, plan, ActionPlan, ActionStep, FailureInjection, StepOutcome, WorldState};

pub const EVENT_SCHEMA: &str = "event-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Observing,
    Inferring,
    Confirming,
    Planning,
    Executing,
    Done,
    Aborted,
}

impl SessionPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionPhase::Done | SessionPhase::Aborted)
    }

    pub fn can_go_to(self, to: SessionPhase) -> bool {
        use SessionPhase::*;
        if to == Aborted {
            return !self.is_terminal();
        }
        matches!(
            (self, to),
            (Observing, Inferring)
                | (Inferring, Confirming)
                | (Confirming, Planning)
                | (Confirming, Observing)
                | (Planning, Executing)
                | (Executing, Done)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// Frames are synthesized from the session world on the gaze clock.
    Mock,
    /// Frames arrive as inputs.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Consecutive positive windows before an object joins the sequence.
    pub debounce_k: usize,
    /// Time without any positive window before inference fires.
    pub quiet_us: i64,
    pub confirmation: ConfirmationConfig,
    pub geometry: SceneGeometry,
    pub injection: FailureInjection,
    pub detector: DetectorMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            debounce_k: 2,
            quiet_us: 1_500_000,
            confirmation: ConfirmationConfig::default(),
            geometry: SceneGeometry::default(),
            injection: FailureInjection::default(),
            detector: DetectorMode::Mock,
        }
    }
}

/// Trained classifier plus the feature settings it was trained with.
#[derive(Debug, Clone)]
pub struct IntentModel {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub features: FeatureConfig,
}

impl IntentModel {
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, NetError> {
        let (config, features, params) = ck.into_params()?;
        Ok(Self {
            params,
            config,
            features,
        })
    }

    /// Fixed network that signals intent when the window's mean gaze ratio
    /// exceeds `threshold`. Only the middle tap of the narrowest convolution and
    /// the head carry weights.
    pub fn mean_ratio_rule(threshold: f64) -> Self {
        let config = ModelConfig::default();
        let mut params = ModelParams::zeros_like(&config);
        let nf = config.num_features;
        params.conv[0].w[(nf + 2) * config.conv_channels_per_scale] = 1.0;
        // The untrained gate is sigmoid(0) = 0.5.
        params.head_hidden.w[0] = 2.0;
        params.head_out.w[0] = 10.0;
        params.head_out.b[0] = -10.0 * threshold;
        Self {
            params,
            config,
            features: FeatureConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    SessionStarted {
        session_id: String,
        objects: Vec<String>,
    },
    Phase {
        from: Option<SessionPhase>,
        to: SessionPhase,
    },
    WindowScored {
        object_id: String,
        start_frame: usize,
        y_hat: f64,
        decided: bool,
    },
    ObjectAdded {
        label: String,
        sequence: Vec<String>,
    },
    Proposals {
        proposals: Vec<IntentProposal>,
    },
    ProposalsFiltered {
        dropped: Vec<String>,
    },
    ConfirmationPhase {
        state: ConfirmationState,
    },
    Confirmed {
        proposal: IntentProposal,
    },
    AllRejected,
    Plan {
        plan: ActionPlan,
    },
    PlanFailed {
        error: String,
    },
    Step {
        outcome: StepOutcome,
    },
    ExecutionFinished {
        success: bool,
        attempts: u32,
        world: WorldState,
    },
    Aborted {
        cause: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub schema: String,
    pub seq: u64,
    pub t_us: i64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionInput {
    Gaze(GazeSample),
    Frame(FrameRecord),
    End,
    Abort(String),
}

/// Decisions and phase trajectory of a session, as recorded or as replayed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub phases: Vec<SessionPhase>,
    pub added_objects: Vec<String>,
    pub proposals: Vec<Vec<String>>,
    pub confirmed: Vec<String>,
    pub plans: Vec<Vec<ActionStep>>,
    pub execution: Option<(bool, u32)>,
    pub abort_cause: Option<String>,
    pub final_world: Option<WorldState>,
}

/// Read-only view for status queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub phase: SessionPhase,
    pub sequence: Vec<String>,
    pub confirmation: Option<ConfirmationState>,
    pub world: WorldState,
    pub events: u64,
    pub t_us: i64,
}

struct TrackState {
    last_box: Option<BBox>,
    missed: usize,
    frames: VecDeque<Option<FeatureFrame>>,
    positives: usize,
}

pub struct SessionMachine {
    id: String,
    cfg: SessionConfig,
    model: Arc<IntentModel>,
    llm: Arc<dyn LlmClient>,
    world: WorldState,
    phase: SessionPhase,
    events: Vec<SessionEvent>,
    summary: SessionSummary,
    now_us: i64,
    last_gaze_us: Option<i64>,
    next_frame_us: Option<i64>,
    open_frame: Option<FrameRecord>,
    pending: VecDeque<GazeSample>,
    carried: Option<Point>,
    tracks: BTreeMap<String, TrackState>,
    frames_seen: usize,
    sequence: GazedObjectSequence,
    last_positive_us: Option<i64>,
    confirmation: Option<ConfirmationLoop>,
}

impl SessionMachine {
    pub fn new(
        id: impl Into<String>,
        cfg: SessionConfig,
        model: Arc<IntentModel>,
        llm: Arc<dyn LlmClient>,
        world: WorldState,
    ) -> Self {
        let id = id.into();
        let mut m = Self {
            id: id.clone(),
            cfg,
            model,
            llm,
            phase: SessionPhase::Observing,
            events: Vec::new(),
            summary: SessionSummary::default(),
            now_us: 0,
            last_gaze_us: None,
            next_frame_us: None,
            open_frame: None,
            pending: VecDeque::new(),
            carried: None,
            tracks: BTreeMap::new(),
            frames_seen: 0,
            sequence: GazedObjectSequence::new(),
            last_positive_us: None,
            confirmation: None,
            world,
        };
        let objects = m.world.labels();
        m.emit(EventBody::SessionStarted { session_id: id, objects });
        m.emit(EventBody::Phase {
            from: None,
            to: SessionPhase::Observing,
        });
        m.summary.phases.push(SessionPhase::Observing);
        m
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn phase(&self) -> SessionPhase {
        self.phase
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn summary(&self) -> &SessionSummary {
        &self.summary
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            id: self.id.clone(),
            phase: self.phase,
            sequence: self.sequence.labels(),
            confirmation: self.confirmation.as_ref().map(|c| c.state().clone()),
            world: self.world.clone(),
            events: self.events.len() as u64,
            t_us: self.now_us,
        }
    }

    fn emit(&mut self, body: EventBody) {
        let seq = self.events.len() as u64;
        self.events.push(SessionEvent {
            schema: EVENT_SCHEMA.to_string(),
            seq,
            t_us: self.now_us,
            body,
        });
    }

    fn transition(&mut self, to: SessionPhase) {
        debug_assert!(self.phase.can_go_to(to), "{:?} -> {to:?}", self.phase);
        let from = self.phase;
        self.phase = to;
        self.summary.phases.push(to);
        self.emit(EventBody::Phase { from: Some(from), to });
    }

    fn abort(&mut self, cause: impl Into<String>) {
        if self.phase.is_terminal() {
            return;
        }
        let cause = cause.into();
        self.summary.abort_cause = Some(cause.clone());
        self.emit(EventBody::Aborted { cause });
        self.transition(SessionPhase::Aborted);
    }

    /// Feed one input; returns the events it produced.
    pub fn push(&mut self, input: SessionInput) -> Vec<SessionEvent> {
        let before = self.events.len();
        if !self.phase.is_terminal() {
            match input {
                SessionInput::Gaze(s) => self.on_gaze(s),
                SessionInput::Frame(f) => self.on_frame(f),
                SessionInput::End => {
                    if self.phase == SessionPhase::Observing {
                        self.close_open_frame();
                    }
                    self.abort("stream_end");
                }
                SessionInput::Abort(cause) => self.abort(cause),
            }
        }
        self.events[before..].to_vec()
    }

    fn on_gaze(&mut self, s: GazeSample) {
        if let Some(prev) = self.last_gaze_us {
            if s.t_us <= prev {
                self.abort(format!("stream_order: gaze t_us {} after {prev}", s.t_us));
                return;
            }
        }
        self.last_gaze_us = Some(s.t_us);
        self.now_us = self.now_us.max(s.t_us);
        if self.cfg.detector == DetectorMode::Mock {
            let mut next = self.next_frame_us.unwrap_or(s.t_us);
            while next <= s.t_us && !self.phase.is_terminal() {
                let frame = FrameRecord {
                    frame_idx: self.open_frame.as_ref().map_or(0, |f| f.frame_idx + 1),
                    t_us: next,
                    gaze: None,
                    detections: mock_detect(&self.world, &self.cfg.geometry),
                };
                self.on_frame(frame);
                next += FRAME_PERIOD_US;
            }
            self.next_frame_us = Some(next);
        }
        match self.phase {
            SessionPhase::Observing => self.pending.push_back(s),
            SessionPhase::Confirming => self.on_confirmation_gaze(&s),
            _ => {}
        }
    }

    fn on_frame(&mut self, frame: FrameRecord) {
        if let Some(open) = &self.open_frame {
            if frame.t_us <= open.t_us {
                self.abort(format!("stream_order: frame t_us {} after {}", frame.t_us, open.t_us));
                return;
            }
        }
        self.now_us = self.now_us.max(frame.t_us);
        let end = frame.t_us;
        let finished = self.open_frame.replace(frame);
        if self.phase != SessionPhase::Observing {
            self.pending.clear();
            return;
        }
        if let Some(f) = finished {
            self.finalize_frame(f, end);
        }
    }

    fn close_open_frame(&mut self) {
        if let Some(f) = self.open_frame.take() {
            let end = f.t_us + FRAME_PERIOD_US;
            self.finalize_frame(f, end);
        }
    }

    /// Mean of the pending on-screen samples in `[frame.t_us, end)`.
    fn aligned_gaze(&mut self, start: i64, end: i64) -> AlignedGaze {
        while self.pending.front().is_some_and(|s| s.t_us < start) {
            self.pending.pop_front();
        }
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        while self.pending.front().is_some_and(|s| s.t_us < end) {
            let s = self.pending.pop_front().expect("checked");
            if s.on_screen {
                sx += s.gx;
                sy += s.gy;
                n += 1;
            }
        }
        if n > 0 {
            let p = Point::new(sx / n as f64, sy / n as f64);
            self.carried = Some(p);
            AlignedGaze {
                point: Some(p),
                observed: true,
            }
        } else {
            AlignedGaze {
                point: self.carried,
                observed: false,
            }
        }
    }

    fn finalize_frame(&mut self, frame: FrameRecord, end: i64) {
        let gaze = self.aligned_gaze(frame.t_us, end);
        let feats = self.model.features.clone();
        let mut seen: BTreeMap<String, BBox> = BTreeMap::new();
        for d in &frame.detections {
            let id = if d.object_id.is_empty() { &d.label } else { &d.object_id };
            seen.insert(id.clone(), d.bbox);
        }
        for id in seen.keys() {
            if !self.tracks.contains_key(id) {
                let history = VecDeque::from(vec![None; self.frames_seen.min(feats.sw)]);
                self.tracks.insert(
                    id.clone(),
                    TrackState {
                        last_box: None,
                        missed: 0,
                        frames: history,
                        positives: 0,
                    },
                );
            }
        }
        for (id, tr) in self.tracks.iter_mut() {
            let b = match seen.get(id) {
                Some(b) => {
                    tr.last_box = Some(*b);
                    tr.missed = 0;
                    Some(*b)
                }
                None => {
                    tr.missed += 1;
                    if tr.missed < TRACK_GAP_FILL {
                        tr.last_box
                    } else {
                        None
                    }
                }
            };
            tr.frames.push_back(feature_frame(b.as_ref(), &gaze, &self.cfg.geometry, &feats));
            while tr.frames.len() > feats.sw {
                tr.frames.pop_front();
            }
        }
        self.frames_seen += 1;
        if self.frames_seen >= feats.sw && (self.frames_seen - feats.sw) % feats.stride == 0 {
            self.score_windows(self.frames_seen - feats.sw, frame.t_us);
        }
        if self.phase == SessionPhase::Observing && !self.sequence.is_empty() {
            if let Some(last) = self.last_positive_us {
                if frame.t_us - last >= self.cfg.quiet_us {
                    self.run_inference();
                }
            }
        }
    }

    fn score_windows(&mut self, start_frame: usize, t_us: i64) {
        let sw = self.model.features.sw;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (id, tr) in &mut self.tracks {
            let full: Option<Vec<FeatureFrame>> = tr.frames.iter().copied().collect();
            match full {
                Some(rows) if rows.len() == sw => {
                    ids.push(id.clone());
                    values.extend(rows.iter().flat_map(|f| f.to_array()));
                }
                _ => tr.positives = 0,
            }
        }
        if ids.is_empty() {
            return;
        }
        debug_assert_eq!(values.len(), ids.len() * sw * NUM_FEATURES);
        let probs = match WindowBatch::from_values(ids.len(), sw, values, None)
            .map_err(|e| e.to_string())
            .and_then(|b| predict_proba(&self.model.params, &self.model.config, &b).map_err(|e| e.to_string()))
        {
            Ok(p) => p,
            Err(e) => {
                self.abort(format!("model_error: {e}"));
                return;
            }
        };
        for (id, y_hat) in ids.into_iter().zip(probs) {
            let p = Prediction::from_probability(y_hat);
            self.emit(EventBody::WindowScored {
                object_id: id.clone(),
                start_frame,
                y_hat,
                decided: p.decided,
            });
            let tr = self.tracks.get_mut(&id).expect("scored track exists");
            if !p.decided {
                tr.positives = 0;
                continue;
            }
            tr.positives += 1;
            self.last_positive_us = Some(t_us);
            if tr.positives >= self.cfg.debounce_k && self.sequence.push(&id, t_us) {
                self.summary.added_objects.push(id.clone());
                let sequence = self.sequence.labels();
                self.emit(EventBody::ObjectAdded { label: id, sequence });
            }
        }
    }

    fn reset_observation(&mut self) {
        self.pending.clear();
        self.tracks.clear();
        self.frames_seen = 0;
        self.sequence = GazedObjectSequence::new();
        self.last_positive_us = None;
        self.confirmation = None;
    }

    fn run_inference(&mut self) {
        self.transition(SessionPhase::Inferring);
        let proposals = match infer_intentions(&self.sequence, self.llm.as_ref()) {
            Ok(p) => p,
            Err(e) => {
                self.abort(format!("inference_failed: {e}"));
                return;
            }
        };
        self.summary
            .proposals
            .push(proposals.iter().map(|p| p.description.clone()).collect());
        self.emit(EventBody::Proposals {
            proposals: proposals.clone(),
        });
        let (kept, dropped) = filter_proposals(proposals, &self.world);
        if !dropped.is_empty() {
            self.emit(EventBody::ProposalsFiltered { dropped });
        }
        self.transition(SessionPhase::Confirming);
        let layout = RegionLayout::new(self.cfg.geometry.height()).expect("geometry height is positive");
        match ConfirmationLoop::new(kept, self.now_us, layout, self.cfg.confirmation) {
            Some(lp) => {
                let state = lp.state().clone();
                self.confirmation = Some(lp);
                self.emit(EventBody::ConfirmationPhase { state });
            }
            None => self.all_rejected(),
        }
    }

    fn all_rejected(&mut self) {
        self.emit(EventBody::AllRejected);
        self.transition(SessionPhase::Observing);
        self.reset_observation();
    }

    fn on_confirmation_gaze(&mut self, s: &GazeSample) {
        let Some(lp) = self.confirmation.as_mut() else {
            return;
        };
        let changes = lp.push(s);
        let outcome = lp.outcome().cloned();
        for state in changes {
            self.emit(EventBody::ConfirmationPhase { state });
        }
        match outcome {
            Some(ConfirmationOutcome::Accepted { proposal }) => {
                self.summary.confirmed.push(proposal.description.clone());
                self.emit(EventBody::Confirmed {
                    proposal: proposal.clone(),
                });
                self.confirmation = None;
                self.plan_and_execute(&proposal.description);
            }
            Some(ConfirmationOutcome::AllRejected) => self.all_rejected(),
            None => {}
        }
    }

    fn plan_and_execute(&mut self, intention: &str) {
        self.transition(SessionPhase::Planning);
        let plan = match plan(intention, &self.world, self.llm.as_ref()) {
            Ok(p) => p,
            Err(e) => {
                self.emit(EventBody::PlanFailed { error: e.to_string() });
                self.abort("plan_failed");
                return;
            }
        };
        self.summary.plans.push(plan.steps.clone());
        self.emit(EventBody::Plan { plan: plan.clone() });
        self.transition(SessionPhase::Executing);
        let report = execute(&plan, &self.world, &self.cfg.injection);
        for outcome in &report.outcomes {
            self.emit(EventBody::Step {
                outcome: outcome.clone(),
            });
        }
        self.world = report.world.clone();
        self.summary.execution = Some((report.success, report.attempts));
        self.summary.final_world = Some(report.world.clone());
        self.emit(EventBody::ExecutionFinished {
            success: report.success,
            attempts: report.attempts,
            world: report.world,
        });
        if report.success {
            self.transition(SessionPhase::Done);
        } else {
            self.abort("execution_failed");
        }
    }
}

/// Frames on the 30 Hz clock from `world`, interleaved with the gaze samples;
/// a frame precedes samples with the same timestamp.
pub fn mock_inputs(world: &WorldState, geometry: &SceneGeometry, gaze: &[GazeSample]) -> Vec<SessionInput> {
    let mut out = Vec::with_capacity(gaze.len() + gaze.len() / 4 + 1);
    let Some(first) = gaze.first() else {
        return out;
    };
    let dets = mock_detect(world, geometry);
    let mut next = first.t_us;
    let mut idx = 0;
    for s in gaze {
        while next <= s.t_us {
            out.push(SessionInput::Frame(FrameRecord {
                frame_idx: idx,
                t_us: next,
                gaze: None,
                detections: dets.clone(),
            }));
            idx += 1;
            next += FRAME_PERIOD_US;
        }
        out.push(SessionInput::Gaze(*s));
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("seq {seq}: unsupported schema {schema:?}")]
    Schema { seq: u64, schema: String },
    #[error("seq {got}: expected seq {expected}")]
    Gap { expected: u64, got: u64 },
    #[error("seq {seq}: illegal transition {from:?} -> {to:?}")]
    Transition {
        seq: u64,
        from: Option<SessionPhase>,
        to: SessionPhase,
    },
    #[error("seq {seq}: executing without a confirmed intention")]
    Unconfirmed { seq: u64 },
    #[error("seq {seq}: {detail}")]
    Inconsistent { seq: u64, detail: String },
    #[error("log ends at seq {last} in non-terminal phase {phase:?}")]
    Truncated { last: u64, phase: Option<SessionPhase> },
}

/// Fold a recorded log into its phase trajectory and decisions. Checks schema,
/// gapless sequence numbers, legal transitions, and that execution is always
/// preceded by a confirmation. Never contacts any client.
pub fn replay(events: &[SessionEvent]) -> Result<SessionSummary, ReplayError> {
    let mut s = SessionSummary::default();
    let mut phase: Option<SessionPhase> = None;
    let mut confirmed_since_ask = false;
    for (i, ev) in events.iter().enumerate() {
        if ev.schema != EVENT_SCHEMA {
            return Err(ReplayError::Schema {
                seq: ev.seq,
                schema: ev.schema.clone(),
            });
        }
        if ev.seq != i as u64 {
            return Err(ReplayError::Gap {
                expected: i as u64,
                got: ev.seq,
            });
        }
        if phase.is_some_and(SessionPhase::is_terminal) {
            return Err(ReplayError::Inconsistent {
                seq: ev.seq,
                detail: "event after terminal phase".into(),
            });
        }
        match &ev.body {
            EventBody::Phase { from, to } => {
                let legal = match (phase, from) {
                    (None, None) => *to == SessionPhase::Observing,
                    (Some(p), Some(f)) => p == *f && p.can_go_to(*to),
                    _ => false,
                };
                if !legal {
                    return Err(ReplayError::Transition {
                        seq: ev.seq,
                        from: *from,
                        to: *to,
                    });
                }
                if *to == SessionPhase::Confirming {
                    confirmed_since_ask = false;
                }
                if matches!(*to, SessionPhase::Planning | SessionPhase::Executing) && !confirmed_since_ask {
                    return Err(ReplayError::Unconfirmed { seq: ev.seq });
                }
                phase = Some(*to);
                s.phases.push(*to);
            }
            EventBody::ObjectAdded { label, .. } => s.added_objects.push(label.clone()),
            EventBody::Proposals { proposals } => {
                s.proposals.push(proposals.iter().map(|p| p.description.clone()).collect())
            }
            EventBody::Confirmed { proposal } => {
                if phase != Some(SessionPhase::Confirming) {
                    return Err(ReplayError::Inconsistent {
                        seq: ev.seq,
                        detail: "confirmation outside the confirming phase".into(),
                    });
                }
                confirmed_since_ask = true;
                s.confirmed.push(proposal.description.clone());
            }
            EventBody::Plan { plan } => s.plans.push(plan.steps.clone()),
            EventBody::ExecutionFinished {
                success,
                attempts,
                world,
            } => {
                s.execution = Some((*success, *attempts));
                s.final_world = Some(world.clone());
            }
            EventBody::Aborted { cause } => s.abort_cause = Some(cause.clone()),
            _ => {}
        }
    }
    if !phase.is_some_and(SessionPhase::is_terminal) {
        return Err(ReplayError::Truncated {
            last: events.last().map_or(0, |e| e.seq),
            phase,
        });
    }
    Ok(s)
}

/// Safety audit: no planning or execution phase without a confirmation since
/// the most recent question.
pub fn audit_safety(events: &[SessionEvent]) -> Result<(), ReplayError> {
    let mut confirmed = false;
    for ev in events {
        match &ev.body {
            EventBody::Phase {
                to: SessionPhase::Confirming,
                ..
            } => confirmed = false,
            EventBody::Confirmed { .. } => confirmed = true,
            EventBody::Phase {
                to: SessionPhase::Planning | SessionPhase::Executing,
                ..
            } if !confirmed => return Err(ReplayError::Unconfirmed { seq: ev.seq }),
            _ => {}
        }
    }
    Ok(())
}

pub fn log_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}

/// Append events to a line-delimited log.
pub fn append_log(path: &Path, events: &[SessionEvent]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for ev in events {
        serde_json::to_writer(&mut buf, ev).map_err(std::io::Error::other)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)
}

pub fn read_log(path: &Path) -> Result<Vec<SessionEvent>, ReplayError> {
    let f = fs::File::open(path).map_err(|e| ReplayError::Parse {
        line: 0,
        detail: format!("{}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ReplayError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReplayError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::MockLlm;
    use crate::planner::{Location, WorldFixture};

    fn world() -> WorldState {
        let fx: WorldFixture = r#"{"objects":{
            "kettle":{"kind":"vessel","cell":[0,0],"contents":{"substance":"water","amount":200,"capacity":1000}},
            "cup":{"kind":"container","cell":[0,2],"contents":{"amount":0,"capacity":150}}}}"#
            .parse()
            .unwrap();
        fx.into_world().unwrap()
    }

    fn ratio_model() -> Arc<IntentModel> {
        Arc::new(IntentModel::mean_ratio_rule(2.0))
    }

    fn fixate(out: &mut Vec<GazeSample>, t: &mut i64, x: f64, y: f64, ms: i64) {
        let end = *t + ms * 1000;
        while *t < end {
            out.push(GazeSample::new(*t, x, y));
            *t += 8_333;
        }
    }

    fn pour_script() -> Vec<GazeSample> {
        let w = world();
        let k = w.objects["kettle"].bbox.unwrap().center();
        let c = w.objects["cup"].bbox.unwrap().center();
        let mut g = Vec::new();
        let mut t = 1_000_000;
        fixate(&mut g, &mut t, 1030.0, 560.0, 600);
        fixate(&mut g, &mut t, k.x, k.y, 1800);
        fixate(&mut g, &mut t, c.x, c.y, 1800);
        fixate(&mut g, &mut t, 1030.0, 560.0, 2500);
        fixate(&mut g, &mut t, 544.0, 1000.0, 1200);
        g
    }

    fn run(gaze: &[GazeSample], end: bool) -> SessionMachine {
        let mut m = SessionMachine::new(
            "t1",
            SessionConfig::default(),
            ratio_model(),
            Arc::new(MockLlm::default()),
            world(),
        );
        for s in gaze {
            m.push(SessionInput::Gaze(*s));
        }
        if end {
            m.push(SessionInput::End);
        }
        m
    }

    #[test]
    fn pour_water_end_to_end() {
        let m = run(&pour_script(), true);
        assert_eq!(m.phase(), SessionPhase::Done, "{:?}", m.summary());
        assert_eq!(m.summary().added_objects, ["kettle", "cup"]);
        assert_eq!(m.summary().confirmed, ["pour water into the cup"]);
        assert_eq!(m.world().amount_of("cup"), 150.0);
        assert_eq!(m.world().objects["kettle"].location, Location::Table);
        assert_eq!(replay(m.events()).unwrap(), *m.summary());
        audit_safety(m.events()).unwrap();
    }

    #[test]
    fn stream_end_aborts() {
        let g: Vec<_> = pour_script().into_iter().take(200).collect();
        let m = run(&g, true);
        assert_eq!(m.phase(), SessionPhase::Aborted);
        assert_eq!(m.summary().abort_cause.as_deref(), Some("stream_end"));
        replay(m.events()).unwrap();
    }

    #[test]
    fn rejection_returns_to_observing() {
        let mut g = pour_script();
        let mut t = g.last().unwrap().t_us + 8_333;
        g.retain(|s| s.gy < 1000.0);
        // Reject all three proposals by looking at the top band.
        fixate(&mut g, &mut t, 544.0, 80.0, 3000);
        let m = run(&g, true);
        let s = m.summary();
        assert!(s.confirmed.is_empty());
        assert!(s.phases.windows(2).any(|w| w == [SessionPhase::Confirming, SessionPhase::Observing]));
        assert_eq!(s.abort_cause.as_deref(), Some("stream_end"));
        assert!(m.events().iter().any(|e| e.body == EventBody::AllRejected));
        replay(m.events()).unwrap();
    }

    #[test]
    fn log_roundtrip_and_corruption() {
        let m = run(&pour_script(), true);
        let dir = tempfile::tempdir().unwrap();
        let path = log_path(dir.path(), m.id());
        append_log(&path, m.events()).unwrap();
        let events = read_log(&path).unwrap();
        assert_eq!(events, m.events());
        assert_eq!(replay(&events).unwrap(), *m.summary());

        let truncated = &events[..events.len() - 3];
        assert!(matches!(replay(truncated), Err(ReplayError::Truncated { .. })));

        let mut gap = events.clone();
        gap.remove(5);
        assert_eq!(replay(&gap), Err(ReplayError::Gap { expected: 5, got: 6 }));

        let mut unsafe_log = events.clone();
        unsafe_log.retain(|e| !matches!(e.body, EventBody::Confirmed { .. }));
        for (i, e) in unsafe_log.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        assert!(matches!(replay(&unsafe_log), Err(ReplayError::Unconfirmed { .. })));
        assert!(audit_safety(&unsafe_log).is_err());
    }

    #[test]
    fn event_wire_format() {
        let ev = SessionEvent {
            schema: EVENT_SCHEMA.into(),
            seq: 3,
            t_us: 10,
            body: EventBody::Phase {
                from: Some(SessionPhase::Observing),
                to: SessionPhase::Inferring,
            },
        };
        let text = serde_json::to_string(&ev).unwrap();
        assert_eq!(
            text,
            r#"{"schema":"event-v1","seq":3,"t_us":10,"kind":"phase","payload":{"from":"observing","to":"inferring"}}"#
        );
        assert_eq!(serde_json::from_str::<SessionEvent>(&text).unwrap(), ev);
        let ar: SessionEvent = serde_json::from_str(r#"{"schema":"event-v1","seq":0,"t_us":0,"kind":"all_rejected"}"#).unwrap();
        assert_eq!(ar.body, EventBody::AllRejected);
    }

    #[test]
    fn mock_inputs_put_frames_first() {
        let g = vec![GazeSample::new(0, 1.0, 1.0), GazeSample::new(40_000, 1.0, 1.0)];
        let inputs = mock_inputs(&world(), &SceneGeometry::default(), &g);
        assert!(matches!(inputs[0], SessionInput::Frame(_)));
        assert!(matches!(inputs[1], SessionInput::Gaze(_)));
        assert!(matches!(inputs[2], SessionInput::Frame(ref f) if f.t_us == 33_333));
    }
}
