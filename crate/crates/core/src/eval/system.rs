//! Stage-gated system evaluation over scripted sessions.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::jitter;
use super::EvalError;
use crate::inference::LlmClient;
use crate::perception::{GazeSample, Point, SceneGeometry, GAZE_PERIOD_US};
use crate::planner::{FailureInjection, Location, WorldFixture, WorldState, MAX_ATTEMPTS};
use crate::session::{
    replay, DetectorMode, IntentModel, SessionConfig, SessionEvent, SessionInput, SessionMachine, SessionPhase,
};

/// Condition on the final world that counts as task success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum WorldPredicate {
    At { object: String, location: Location },
    Amount { object: String, ml: f64 },
    Watered { plant: String },
    Switch { switch: String, on: bool },
    All { all: Vec<WorldPredicate> },
}

impl WorldPredicate {
    pub fn holds(&self, w: &WorldState) -> bool {
        match self {
            WorldPredicate::At { object, location } => w.objects.get(object).is_some_and(|o| &o.location == location),
            WorldPredicate::Amount { object, ml } => w.exists(object) && w.amount_of(object) == *ml,
            WorldPredicate::Watered { plant } => w.plants.get(plant).copied().unwrap_or(false),
            WorldPredicate::Switch { switch, on } => w.switches.get(switch) == Some(on),
            WorldPredicate::All { all } => all.iter().all(|p| p.holds(w)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedSession {
    pub family: String,
    pub fixture: WorldFixture,
    /// Objects fixated, in order.
    pub targets: Vec<String>,
    pub expected_intention: String,
    /// 1-based proposal rank the scripted user accepts; earlier ranks are rejected.
    pub accept_rank: usize,
    pub predicate: WorldPredicate,
    pub injection: FailureInjection,
    pub seed: u64,
}

const FIXATION_MS: i64 = 1800;
const LEAD_IN_MS: i64 = 600;
const NEUTRAL_MS: i64 = 3500;
const ANSWER_MS: i64 = 1500;
const JITTER_PX: f64 = 15.0;
/// Off every table cell, in the middle band.
const NEUTRAL: Point = Point { x: 1030.0, y: 560.0 };

/// Gaze trace for a session: lead-in, one fixation per target, a neutral
/// pause long enough for inference, then band answers to each question.
pub fn scripted_gaze(s: &ScriptedSession, world: &WorldState, geometry: &SceneGeometry) -> Result<Vec<GazeSample>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut out = Vec::new();
    let mut t = 0i64;
    let mut hold = |p: Point, ms: i64, sigma: f64, out: &mut Vec<GazeSample>| {
        let end = t + ms * 1000;
        while t < end {
            let (dx, dy) = if sigma > 0.0 { jitter(&mut rng, sigma) } else { (0.0, 0.0) };
            out.push(GazeSample::new(t, p.x + dx, p.y + dy));
            t += GAZE_PERIOD_US;
        }
    };
    hold(NEUTRAL, LEAD_IN_MS, 0.0, &mut out);
    for label in &s.targets {
        let b = world
            .objects
            .get(label)
            .and_then(|o| o.bbox)
            .ok_or_else(|| EvalError::Config(format!("{}: target {label} has no box", s.family)))?;
        hold(b.center(), FIXATION_MS, JITTER_PX, &mut out);
    }
    hold(NEUTRAL, NEUTRAL_MS, 0.0, &mut out);
    let h = geometry.height();
    for _ in 1..s.accept_rank {
        hold(Point::new(NEUTRAL.x, h / 6.0), ANSWER_MS, 0.0, &mut out);
    }
    hold(Point::new(NEUTRAL.x, 5.0 * h / 6.0), ANSWER_MS, 0.0, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub family: String,
    pub expected_intention: String,
    pub proposals: Vec<Vec<String>>,
    pub confirmed: Option<String>,
    pub recognition: bool,
    pub plan: bool,
    pub execution: bool,
    pub attempts: Option<u32>,
    pub terminal: SessionPhase,
    pub abort_cause: Option<String>,
    pub final_world: WorldState,
    pub events: Vec<SessionEvent>,
}

pub fn run_system_session(
    s: &ScriptedSession,
    model: Arc<IntentModel>,
    llm: Arc<dyn LlmClient>,
) -> Result<SessionResult, EvalError> {
    let world = s
        .fixture
        .clone()
        .into_world()
        .map_err(|e| EvalError::Config(format!("{}: {e}", s.family)))?;
    let cfg = SessionConfig {
        injection: s.injection.clone(),
        detector: DetectorMode::Mock,
        ..SessionConfig::default()
    };
    let gaze = scripted_gaze(s, &world, &cfg.geometry)?;
    let mut m = SessionMachine::new(s.family.clone(), cfg, model, llm, world);
    for g in gaze {
        m.push(SessionInput::Gaze(g));
    }
    m.push(SessionInput::End);
    let summary = replay(m.events()).map_err(|e| EvalError::Data(format!("{}: {e}", s.family)))?;
    let offered = summary.proposals.iter().any(|round| round.contains(&s.expected_intention));
    let confirmed = summary.confirmed.last().cloned();
    let recognition = offered && confirmed.as_deref() == Some(s.expected_intention.as_str());
    let plan = recognition && !summary.plans.is_empty();
    let attempts = summary.execution.map(|(_, a)| a);
    let execution = plan
        && summary.execution.is_some_and(|(ok, a)| ok && a <= MAX_ATTEMPTS)
        && s.predicate.holds(m.world());
    Ok(SessionResult {
        family: s.family.clone(),
        expected_intention: s.expected_intention.clone(),
        proposals: summary.proposals,
        confirmed,
        recognition,
        plan,
        execution,
        attempts,
        terminal: m.phase(),
        abort_cause: summary.abort_cause,
        final_world: m.world().clone(),
        events: m.events().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub s: usize,
    pub all: usize,
}

impl fmt::Display for StageCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.s, self.all)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub family: String,
    pub overall: StageCount,
    pub recognition: StageCount,
    pub plan: StageCount,
    pub execution: StageCount,
}

impl FamilyRow {
    fn new(family: &str) -> Self {
        Self {
            family: family.to_string(),
            overall: StageCount::default(),
            recognition: StageCount::default(),
            plan: StageCount::default(),
            execution: StageCount::default(),
        }
    }

    /// Each stage is only attempted when the previous one succeeded.
    fn add(&mut self, r: &SessionResult) {
        self.overall.all += 1;
        self.recognition.all += 1;
        if !r.recognition {
            return;
        }
        self.recognition.s += 1;
        self.plan.all += 1;
        if !r.plan {
            return;
        }
        self.plan.s += 1;
        self.execution.all += 1;
        if r.execution {
            self.execution.s += 1;
            self.overall.s += 1;
        }
    }

    pub fn chained(&self) -> bool {
        self.plan.all == self.recognition.s
            && self.execution.all == self.plan.s
            && self.overall.s == self.execution.s
            && self.overall.all == self.recognition.all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub rows: Vec<FamilyRow>,
    pub total: FamilyRow,
}

impl StageReport {
    pub fn from_results(results: &[SessionResult]) -> Self {
        let mut rows: Vec<FamilyRow> = Vec::new();
        let mut total = FamilyRow::new("all");
        for r in results {
            let i = match rows.iter().position(|row| row.family == r.family) {
                Some(i) => i,
                None => {
                    rows.push(FamilyRow::new(&r.family));
                    rows.len() - 1
                }
            };
            rows[i].add(r);
            total.add(r);
        }
        Self { rows, total }
    }

    pub fn chained(&self) -> bool {
        self.rows.iter().all(FamilyRow::chained) && self.total.chained()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16}{:>10}{:>14}{:>10}{:>12}",
            "Task", "Overall", "Recognition", "Plan", "Execution"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                s,
                "{:<16}{:>10}{:>14}{:>10}{:>12}",
                r.family,
                r.overall.to_string(),
                r.recognition.to_string(),
                r.plan.to_string(),
                r.execution.to_string()
            );
        }
        s
    }
}

pub fn run_system_eval(
    sessions: &[ScriptedSession],
    model: Arc<IntentModel>,
    llm: Arc<dyn LlmClient>,
) -> Result<(StageReport, Vec<SessionResult>), EvalError> {
    let results = sessions
        .iter()
        .map(|s| run_system_session(s, model.clone(), llm.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((StageReport::from_results(&results), results))
}

fn fixture(json: &str) -> WorldFixture {
    json.parse().expect("built-in fixture parses")
}

fn session(
    family: &str,
    fixture_json: &str,
    targets: &[&str],
    expected: &str,
    predicate: WorldPredicate,
    seed: u64,
) -> ScriptedSession {
    ScriptedSession {
        family: family.to_string(),
        fixture: fixture(fixture_json),
        targets: targets.iter().map(|t| t.to_string()).collect(),
        expected_intention: expected.to_string(),
        accept_rank: 1,
        predicate,
        injection: FailureInjection::default(),
        seed,
    }
}

/// One scripted session per task family: fetch, put-into, water-plants,
/// toggle-switch, pour-water. Each scene carries a distractor.
pub fn default_system_sessions() -> Vec<ScriptedSession> {
    let at = |o: &str, l: Location| WorldPredicate::At {
        object: o.into(),
        location: l,
    };
    vec![
        session(
            "fetch",
            r#"{"objects":{
                "banana":{"kind":"item","cell":[0,0]},
                "book":{"kind":"item","cell":[1,2]}}}"#,
            &["banana"],
            "fetch the banana",
            at("banana", Location::UserZone),
            1,
        ),
        session(
            "put-into",
            r#"{"objects":{
                "banana":{"kind":"item","cell":[0,0]},
                "bowl":{"kind":"container","cell":[0,2]},
                "book":{"kind":"item","cell":[1,1]}}}"#,
            &["banana", "bowl"],
            "put the banana into the bowl",
            at("banana", Location::Inside("bowl".into())),
            2,
        ),
        session(
            "water-plants",
            r#"{"objects":{
                "kettle":{"kind":"vessel","cell":[0,0],"contents":{"substance":"water","amount":500,"capacity":1000}},
                "plant":{"kind":"plant","cell":[0,2]},
                "book":{"kind":"item","cell":[1,1]}}}"#,
            &["kettle", "plant"],
            "water the plant",
            WorldPredicate::Watered { plant: "plant".into() },
            3,
        ),
        session(
            "toggle-switch",
            r#"{"objects":{
                "switch":{"kind":"switch","cell":[0,1]},
                "book":{"kind":"item","cell":[1,3]}},
                "switches":{"switch":false}}"#,
            &["switch"],
            "toggle the switch",
            WorldPredicate::Switch {
                switch: "switch".into(),
                on: true,
            },
            4,
        ),
        pour_water_session(),
    ]
}

/// Kettle with 200 ml of water and an empty 150 ml cup.
pub fn pour_water_session() -> ScriptedSession {
    session(
        "pour-water",
        r#"{"objects":{
            "kettle":{"kind":"vessel","cell":[0,0],"contents":{"substance":"water","amount":200,"capacity":1000}},
            "cup":{"kind":"container","cell":[0,2],"contents":{"amount":0,"capacity":150}},
            "book":{"kind":"item","cell":[1,1]}}}"#,
        &["kettle", "cup"],
        "pour water into the cup",
        WorldPredicate::All {
            all: vec![
                WorldPredicate::Amount {
                    object: "cup".into(),
                    ml: 150.0,
                },
                WorldPredicate::Amount {
                    object: "kettle".into(),
                    ml: 50.0,
                },
            ],
        },
        5,
    )
}

/// Pour-water with every step failing on the first attempt only.
pub fn injected_retry_session() -> ScriptedSession {
    let mut s = pour_water_session();
    s.family = "pour-water-retry".into();
    s.injection = FailureInjection {
        step_failure_prob: 1.0,
        attempts: Some(vec![1]),
        seed: 7,
    };
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::MockLlm;

    fn model() -> Arc<IntentModel> {
        Arc::new(IntentModel::mean_ratio_rule(2.0))
    }

    fn llm() -> Arc<dyn LlmClient> {
        Arc::new(MockLlm::default())
    }

    #[test]
    fn all_families_pass_every_stage() {
        let (report, results) = run_system_eval(&default_system_sessions(), model(), llm()).unwrap();
        for r in &results {
            assert!(r.execution, "{}: {:?} {:?} {:?}", r.family, r.proposals, r.confirmed, r.abort_cause);
        }
        assert_eq!(report.total.execution, StageCount { s: 5, all: 5 });
        assert_eq!(report.total.recognition.to_string(), "5/5");
        assert!(report.chained());
        assert_eq!(report.rows.len(), 5);
    }

    #[test]
    fn retry_recovers_injected_failure() {
        let r = run_system_session(&injected_retry_session(), model(), llm()).unwrap();
        assert!(r.execution);
        assert_eq!(r.attempts, Some(2));
        assert_eq!(r.final_world.amount_of("cup"), 150.0);
        assert_eq!(r.final_world.amount_of("kettle"), 50.0);
    }

    #[test]
    fn recognition_failure_short_circuits() {
        let mut s = pour_water_session();
        s.expected_intention = "fetch the cup".into();
        let r = run_system_session(&s, model(), llm()).unwrap();
        assert!(!r.recognition && !r.plan && !r.execution);
        let report = StageReport::from_results(&[r]);
        assert_eq!(report.total.recognition, StageCount { s: 0, all: 1 });
        assert_eq!(report.total.plan, StageCount { s: 0, all: 0 });
        assert_eq!(report.total.execution, StageCount { s: 0, all: 0 });
        assert!(report.chained());
    }

    #[test]
    fn later_rank_can_be_accepted() {
        let mut s = pour_water_session();
        s.expected_intention = "fetch the kettle".into();
        s.accept_rank = 2;
        s.predicate = WorldPredicate::At {
            object: "kettle".into(),
            location: Location::UserZone,
        };
        let r = run_system_session(&s, model(), llm()).unwrap();
        assert!(r.execution, "{:?} {:?}", r.confirmed, r.abort_cause);
    }

    #[test]
    fn table_uses_fraction_cells() {
        let mut row = FamilyRow::new("x");
        row.recognition = StageCount { s: 16, all: 20 };
        let report = StageReport {
            rows: vec![row.clone()],
            total: row,
        };
        assert!(report.to_table().contains("16/20"));
    }
}
