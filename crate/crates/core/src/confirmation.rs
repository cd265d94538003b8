//! Three-band gaze confirmation.
//!
//! The scene is split into horizontal thirds. A continuous dwell in the top
//! band rejects the proposal on screen, a dwell in the bottom band agrees, and
//! the middle band is neutral. Proposals are offered in rank order.

use serde::{Deserialize, Serialize};

use crate::inference::IntentProposal;
use crate::perception::GazeSample;

pub const DWELL_US: i64 = 800_000;
pub const TIMEOUT_US: i64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfirmationConfig {
    pub dwell_us: i64,
    pub timeout_us: i64,
}

impl Default for ConfirmationConfig {
    fn default() -> Self {
        Self {
            dwell_us: DWELL_US,
            timeout_us: TIMEOUT_US,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub height: f64,
}

impl RegionLayout {
    pub fn new(height: f64) -> Option<Self> {
        (height.is_finite() && height > 0.0).then_some(Self { height })
    }

    /// Upper edges of area 1 and area 2.
    pub fn bounds(&self) -> (f64, f64) {
        (self.height / 3.0, 2.0 * self.height / 3.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Top band: reject.
    Area1,
    /// Middle band: neutral.
    Area2,
    /// Bottom band: agree.
    Area3,
    Off,
}

pub fn classify_region(gaze: &GazeSample, layout: &RegionLayout) -> Region {
    let y = gaze.gy;
    if !gaze.on_screen || !y.is_finite() || y < 0.0 || y > layout.height {
        return Region::Off;
    }
    let (a, b) = layout.bounds();
    if y < a {
        Region::Area1
    } else if y < b {
        Region::Area2
    } else {
        Region::Area3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Asking,
    DwellingAgree,
    DwellingReject,
    Confirmed,
    Rejected,
    TimedOut,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Confirmed | Phase::Rejected | Phase::TimedOut)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmationState {
    pub phase: Phase,
    pub rank: usize,
    pub question: String,
    /// Time of the first sample of the current dwell, if dwelling.
    pub dwell_start_us: Option<i64>,
    /// Dwell accumulated so far, for progress display.
    pub dwell_us: i64,
    pub deadline_us: i64,
}

pub fn question(intention: &str) -> String {
    format!("Is your intention {intention}?")
}

impl ConfirmationState {
    pub fn new(proposal: &IntentProposal, now_us: i64, cfg: &ConfirmationConfig) -> Self {
        Self {
            phase: Phase::Asking,
            rank: proposal.rank,
            question: question(&proposal.description),
            dwell_start_us: None,
            dwell_us: 0,
            deadline_us: now_us + cfg.timeout_us,
        }
    }
}

/// Advance the machine by one gaze sample taken at `now_us`.
pub fn step(
    state: &ConfirmationState,
    sample: &GazeSample,
    now_us: i64,
    layout: &RegionLayout,
    cfg: &ConfirmationConfig,
) -> ConfirmationState {
    let mut next = state.clone();
    if state.phase.is_terminal() {
        return next;
    }
    if now_us > state.deadline_us {
        next.phase = Phase::TimedOut;
        next.dwell_start_us = None;
        next.dwell_us = 0;
        return next;
    }
    let (dwelling, done) = match classify_region(sample, layout) {
        Region::Area3 => (Phase::DwellingAgree, Phase::Confirmed),
        Region::Area1 => (Phase::DwellingReject, Phase::Rejected),
        Region::Area2 | Region::Off => {
            next.phase = Phase::Asking;
            next.dwell_start_us = None;
            next.dwell_us = 0;
            return next;
        }
    };
    let start = match (state.phase, state.dwell_start_us) {
        (p, Some(t)) if p == dwelling => t,
        _ => now_us,
    };
    next.dwell_start_us = Some(start);
    next.dwell_us = now_us - start;
    next.phase = if next.dwell_us >= cfg.dwell_us { done } else { dwelling };
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ConfirmationOutcome {
    Accepted { proposal: IntentProposal },
    AllRejected,
}

/// Offers proposals one at a time and tracks the active state machine.
#[derive(Debug, Clone)]
pub struct ConfirmationLoop {
    proposals: Vec<IntentProposal>,
    index: usize,
    state: ConfirmationState,
    layout: RegionLayout,
    cfg: ConfirmationConfig,
    outcome: Option<ConfirmationOutcome>,
}

impl ConfirmationLoop {
    /// `None` when there is nothing to confirm.
    pub fn new(
        proposals: Vec<IntentProposal>,
        start_us: i64,
        layout: RegionLayout,
        cfg: ConfirmationConfig,
    ) -> Option<Self> {
        let first = proposals.first()?;
        let state = ConfirmationState::new(first, start_us, &cfg);
        Some(Self {
            proposals,
            index: 0,
            state,
            layout,
            cfg,
            outcome: None,
        })
    }

    pub fn state(&self) -> &ConfirmationState {
        &self.state
    }

    pub fn outcome(&self) -> Option<&ConfirmationOutcome> {
        self.outcome.as_ref()
    }

    pub fn current(&self) -> &IntentProposal {
        &self.proposals[self.index]
    }

    /// Feed one sample. Returns every state whose phase differs from the one
    /// before it, including the opening state of the next proposal.
    pub fn push(&mut self, sample: &GazeSample) -> Vec<ConfirmationState> {
        if self.outcome.is_some() {
            return Vec::new();
        }
        let mut changes = Vec::new();
        let next = step(&self.state, sample, sample.t_us, &self.layout, &self.cfg);
        let changed = next.phase != self.state.phase;
        self.state = next;
        if changed {
            changes.push(self.state.clone());
        }
        match self.state.phase {
            Phase::Confirmed => {
                self.outcome = Some(ConfirmationOutcome::Accepted {
                    proposal: self.proposals[self.index].clone(),
                });
            }
            Phase::Rejected | Phase::TimedOut => {
                self.index += 1;
                match self.proposals.get(self.index) {
                    Some(p) => {
                        self.state = ConfirmationState::new(p, sample.t_us, &self.cfg);
                        changes.push(self.state.clone());
                    }
                    None => self.outcome = Some(ConfirmationOutcome::AllRejected),
                }
            }
            _ => {}
        }
        changes
    }
}

/// Phase trajectory entry: (sample time, rank, phase).
pub type TrajectoryPoint = (i64, usize, Phase);

/// Run the loop over a whole stream. The first proposal's clock starts at the
/// first sample. Returns `None` as outcome when the stream ends undecided.
pub fn run_confirmation(
    proposals: &[IntentProposal],
    gaze: &[GazeSample],
    layout: &RegionLayout,
    cfg: &ConfirmationConfig,
) -> (Option<ConfirmationOutcome>, Vec<TrajectoryPoint>) {
    let Some(first) = gaze.first() else {
        return (None, Vec::new());
    };
    let Some(mut lp) = ConfirmationLoop::new(proposals.to_vec(), first.t_us, *layout, *cfg) else {
        return (Some(ConfirmationOutcome::AllRejected), Vec::new());
    };
    let mut trajectory = vec![(first.t_us, lp.state().rank, lp.state().phase)];
    for s in gaze {
        for st in lp.push(s) {
            trajectory.push((s.t_us, st.rank, st.phase));
        }
        if lp.outcome().is_some() {
            break;
        }
    }
    (lp.outcome().cloned(), trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::GAZE_PERIOD_US;
    use proptest::prelude::*;

    const H: f64 = 1080.0;

    fn layout() -> RegionLayout {
        RegionLayout::new(H).unwrap()
    }

    fn y_of(r: Region) -> f64 {
        match r {
            Region::Area1 => 100.0,
            Region::Area2 => 500.0,
            Region::Area3 => 900.0,
            Region::Off => -1.0,
        }
    }

    /// Samples at 120 Hz for consecutive (region, duration) segments.
    fn stream(segments: &[(Region, i64)]) -> Vec<GazeSample> {
        let mut out = Vec::new();
        let mut t = 0;
        for &(r, dur) in segments {
            let end = t + dur;
            while t < end {
                out.push(match r {
                    Region::Off => GazeSample::off_screen(t),
                    _ => GazeSample::new(t, 400.0, y_of(r)),
                });
                t += GAZE_PERIOD_US;
            }
        }
        out
    }

    fn proposals(n: usize) -> Vec<IntentProposal> {
        (1..=n)
            .map(|rank| IntentProposal {
                rank,
                description: format!("intent {rank}"),
                source_objects: vec![],
            })
            .collect()
    }

    #[test]
    fn bands_are_thirds() {
        let l = layout();
        assert_eq!(classify_region(&GazeSample::new(0, 1.0, 100.0), &l), Region::Area1);
        assert_eq!(classify_region(&GazeSample::new(0, 1.0, 500.0), &l), Region::Area2);
        assert_eq!(classify_region(&GazeSample::new(0, 1.0, 900.0), &l), Region::Area3);
        assert_eq!(classify_region(&GazeSample::new(0, 1.0, 360.0), &l), Region::Area2);
        assert_eq!(classify_region(&GazeSample::new(0, 1.0, 720.0), &l), Region::Area3);
        assert_eq!(classify_region(&GazeSample::off_screen(0), &l), Region::Off);
    }

    #[test]
    fn dwell_confirms() {
        let (out, _) = run_confirmation(&proposals(1), &stream(&[(Region::Area3, 900_000)]), &layout(), &Default::default());
        assert!(matches!(out, Some(ConfirmationOutcome::Accepted { proposal }) if proposal.rank == 1));
    }

    #[test]
    fn interrupted_dwell_restarts() {
        let g = stream(&[(Region::Area3, 500_000), (Region::Area2, 100_000), (Region::Area3, 900_000)]);
        let (out, traj) = run_confirmation(&proposals(1), &g, &layout(), &Default::default());
        assert!(matches!(out, Some(ConfirmationOutcome::Accepted { .. })));
        let (t, _, p) = *traj.last().unwrap();
        assert_eq!(p, Phase::Confirmed);
        let l = layout();
        let second_start = g
            .windows(2)
            .filter(|w| classify_region(&w[0], &l) == Region::Area2 && classify_region(&w[1], &l) == Region::Area3)
            .map(|w| w[1].t_us)
            .next()
            .unwrap();
        assert!(t - second_start >= DWELL_US, "confirmed at {t}");
        assert!(t - second_start < DWELL_US + GAZE_PERIOD_US);
    }

    #[test]
    fn neutral_band_times_out() {
        let (out, traj) = run_confirmation(&proposals(1), &stream(&[(Region::Area2, 10_100_000)]), &layout(), &Default::default());
        assert_eq!(out, Some(ConfirmationOutcome::AllRejected));
        assert_eq!(traj.last().unwrap().2, Phase::TimedOut);
    }

    #[test]
    fn reject_then_accept_second() {
        let g = stream(&[(Region::Area1, 850_000), (Region::Area3, 850_000)]);
        let (out, _) = run_confirmation(&proposals(3), &g, &layout(), &Default::default());
        assert!(matches!(out, Some(ConfirmationOutcome::Accepted { proposal }) if proposal.rank == 2));
    }

    #[test]
    fn all_rejected() {
        let g = stream(&[(Region::Area1, 3_000_000)]);
        let (out, traj) = run_confirmation(&proposals(3), &g, &layout(), &Default::default());
        assert_eq!(out, Some(ConfirmationOutcome::AllRejected));
        assert_eq!(traj.iter().filter(|p| p.2 == Phase::Rejected).count(), 3);
    }

    #[test]
    fn question_text() {
        assert_eq!(question("pour water into the cup"), "Is your intention pour water into the cup?");
    }

    fn segments() -> impl Strategy<Value = Vec<(Region, i64)>> {
        let region = prop_oneof![
            Just(Region::Area1),
            Just(Region::Area2),
            Just(Region::Area3),
            Just(Region::Off)
        ];
        prop::collection::vec((region, 1i64..1_200_000), 1..20)
    }

    proptest! {
        #[test]
        fn short_dwells_never_decide(segs in segments()) {
            let segs: Vec<_> = segs.into_iter().map(|(r, d)| match r {
                Region::Area1 | Region::Area3 => (r, d.min(DWELL_US - GAZE_PERIOD_US)),
                _ => (r, d),
            }).collect();
            // Adjacent equal bands would merge into a longer dwell.
            let mut merged: Vec<(Region, i64)> = Vec::new();
            for (r, d) in segs {
                if let Some(last) = merged.last() {
                    if last.0 == r && r != Region::Area2 && r != Region::Off {
                        merged.push((Region::Area2, 10_000));
                    }
                }
                merged.push((r, d));
            }
            let (_, traj) = run_confirmation(&proposals(1), &stream(&merged), &layout(), &Default::default());
            prop_assert!(traj.iter().all(|p| p.2 != Phase::Confirmed && p.2 != Phase::Rejected));
        }

        #[test]
        fn replay_reproduces_trajectory(segs in segments()) {
            let g = stream(&segs);
            let a = run_confirmation(&proposals(3), &g, &layout(), &Default::default());
            let b = run_confirmation(&proposals(3), &g, &layout(), &Default::default());
            prop_assert_eq!(a, b);
        }
    }
}
