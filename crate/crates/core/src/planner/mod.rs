//! Action planning and simulated execution.
//!
//! Plans are sequences of whitelisted operation calls. The same transition
//! function drives both validation (on a scratch copy of the world) and
//! execution, so a plan that validates cannot hit a precondition error when run
//! against the same world.

mod world;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{ChatMessage, ClientKind, LlmClient, LlmError};
pub use world::{
    cell_box, Contents, FixtureObject, Gripper, Location, ObjectKind, WorldFixture, WorldObject,
    WorldState, TABLE, USER_ZONE,
};

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("world fixture: {0}")]
    Fixture(String),
    #[error("plan invalid after repair: {0}")]
    Invalid(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Api {
    Locate,
    Grasp,
    MoveTo,
    Place,
    Pour,
    Toggle,
    Release,
}

impl Api {
    pub const ALL: [Api; 7] = [
        Api::Locate,
        Api::Grasp,
        Api::MoveTo,
        Api::Place,
        Api::Pour,
        Api::Toggle,
        Api::Release,
    ];

    pub fn parse(s: &str) -> Option<Api> {
        Api::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Api::Locate => "locate",
            Api::Grasp => "grasp",
            Api::MoveTo => "move_to",
            Api::Place => "place",
            Api::Pour => "pour",
            Api::Toggle => "toggle",
            Api::Release => "release",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Api::Release => 0,
            Api::Pour => 2,
            _ => 1,
        }
    }

    pub fn signature(self) -> &'static str {
        match self {
            Api::Locate => "locate(object)",
            Api::Grasp => "grasp(object)",
            Api::MoveTo => "move_to(target)",
            Api::Place => "place(target)",
            Api::Pour => "pour(source, target)",
            Api::Toggle => "toggle(switch)",
            Api::Release => "release()",
        }
    }
}

/// One step on the wire: `{"api":"grasp","args":["kettle"]}`. The api name is
/// kept as text so out-of-whitelist calls survive parsing and get reported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    pub api: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ActionStep {
    pub fn new(api: Api, args: &[&str]) -> Self {
        Self {
            api: api.name().to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for ActionStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.api, self.args.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Mock,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub steps: Vec<ActionStep>,
    pub source: PlanSource,
    pub intention: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.message)
    }
}

fn obj<'a>(w: &'a WorldState, label: &str) -> Result<&'a WorldObject, String> {
    w.objects
        .get(label)
        .ok_or_else(|| format!("unknown object '{label}'"))
}

/// Apply one step to the world, checking its preconditions first. On `Err` the
/// world is untouched.
pub fn apply_step(w: &mut WorldState, step: &ActionStep) -> Result<String, String> {
    let api = Api::parse(&step.api).ok_or_else(|| format!("api '{}' not in whitelist", step.api))?;
    if step.args.len() != api.arity() {
        return Err(format!(
            "{} takes {} argument(s), got {}",
            api.signature(),
            api.arity(),
            step.args.len()
        ));
    }
    for a in &step.args {
        if !w.exists(a) {
            return Err(format!("unknown object '{a}'"));
        }
    }
    match api {
        Api::Locate => {
            let o = obj(w, &step.args[0])?;
            if !(o.is_visible() || o.location == Location::Held) {
                return Err(format!("{} is not visible", step.args[0]));
            }
            Ok(format!("located {}", step.args[0]))
        }
        Api::MoveTo => {
            w.arm_at = Some(step.args[0].clone());
            Ok(format!("arm at {}", step.args[0]))
        }
        Api::Grasp => {
            let label = &step.args[0];
            if w.held().is_some() {
                return Err("gripper occupied".into());
            }
            let o = obj(w, label)?;
            if !o.kind.graspable() {
                return Err(format!("{label} is not graspable"));
            }
            if !o.is_visible() {
                return Err(format!("{label} is not on the table"));
            }
            w.objects.get_mut(label).expect("checked").location = Location::Held;
            w.gripper = Gripper::Holding(label.clone());
            w.pending_place = None;
            Ok(format!("holding {label}"))
        }
        Api::Place => {
            let held = w.held().ok_or("gripper empty")?.to_string();
            let target = &step.args[0];
            if *target == held {
                return Err("cannot place an object into itself".into());
            }
            if target != TABLE && target != USER_ZONE && obj(w, target)?.kind != ObjectKind::Container {
                return Err(format!("{target} cannot receive objects"));
            }
            w.pending_place = Some(target.clone());
            Ok(format!("{held} positioned at {target}"))
        }
        Api::Release => {
            let held = w.held().ok_or("gripper empty")?.to_string();
            let target = w
                .pending_place
                .take()
                .or_else(|| w.arm_at.clone())
                .unwrap_or_else(|| TABLE.to_string());
            let location = if target == USER_ZONE {
                Location::UserZone
            } else if w
                .objects
                .get(&target)
                .is_some_and(|o| o.kind == ObjectKind::Container && target != held)
            {
                Location::Inside(target.clone())
            } else {
                Location::Table
            };
            w.objects.get_mut(&held).expect("held exists").location = location.clone();
            w.gripper = Gripper::Empty;
            Ok(format!("released {held} at {location:?}"))
        }
        Api::Pour => {
            let (src, dst) = (&step.args[0], &step.args[1]);
            match w.held() {
                None => return Err("gripper empty".into()),
                Some(h) if h != src => return Err(format!("holding {h}, not {src}")),
                _ => {}
            }
            if src == dst {
                return Err("cannot pour into itself".into());
            }
            let s = obj(w, src)?;
            if s.kind != ObjectKind::Vessel {
                return Err(format!("{src} is not a vessel"));
            }
            let d = obj(w, dst)?;
            if !d.kind.pour_target() {
                return Err(format!("{dst} cannot receive liquid"));
            }
            let src_c = s.contents.clone().unwrap_or(Contents {
                substance: None,
                amount: 0.0,
                capacity: None,
            });
            let dst_c = d.contents.clone().unwrap_or(Contents {
                substance: None,
                amount: 0.0,
                capacity: None,
            });
            if let (Some(a), Some(b)) = (&src_c.substance, &dst_c.substance) {
                if a != b && dst_c.amount > 0.0 {
                    return Err(format!("{dst} already holds {b}"));
                }
            }
            let moved = src_c.amount.min(dst_c.free());
            let substance = src_c.substance.clone();
            let dst_kind = d.kind;
            let so = w.objects.get_mut(src).expect("checked");
            let sc = so.contents.get_or_insert(src_c.clone());
            sc.amount -= moved;
            let dobj = w.objects.get_mut(dst).expect("checked");
            let dc = dobj.contents.get_or_insert(dst_c.clone());
            dc.amount += moved;
            if moved > 0.0 {
                dc.substance = substance.clone();
            }
            if dst_kind == ObjectKind::Plant && moved > 0.0 {
                w.plants.insert(dst.clone(), true);
            }
            Ok(format!(
                "poured {moved} of {} from {src} into {dst}",
                substance.as_deref().unwrap_or("nothing")
            ))
        }
        Api::Toggle => {
            let label = &step.args[0];
            if w.held().is_some() {
                return Err("gripper occupied".into());
            }
            if obj(w, label)?.kind != ObjectKind::Switch {
                return Err(format!("{label} is not a switch"));
            }
            let s = w.switches.entry(label.clone()).or_insert(false);
            *s = !*s;
            Ok(format!("{label} {}", if *s { "on" } else { "off" }))
        }
    }
}

/// Check whitelist, arity, labels and simulated preconditions. The world is not
/// modified.
pub fn validate(plan: &ActionPlan, world: &WorldState) -> Result<(), Vec<Violation>> {
    let mut scratch = world.clone();
    let mut violations = Vec::new();
    if plan.steps.is_empty() {
        violations.push(Violation {
            step: 0,
            message: "plan is empty".into(),
        });
    }
    for (i, step) in plan.steps.iter().enumerate() {
        if let Err(message) = apply_step(&mut scratch, step) {
            violations.push(Violation { step: i, message });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Per-step physical failure model for the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureInjection {
    pub step_failure_prob: f64,
    /// 1-based attempts the injection applies to; all attempts when `None`.
    pub attempts: Option<Vec<u32>>,
    pub seed: u64,
}

impl Default for FailureInjection {
    fn default() -> Self {
        Self {
            step_failure_prob: 0.0,
            attempts: None,
            seed: 0,
        }
    }
}

impl FailureInjection {
    fn active(&self, attempt: u32) -> bool {
        self.step_failure_prob > 0.0
            && self.attempts.as_ref().map_or(true, |a| a.contains(&attempt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub attempt: u32,
    pub step: usize,
    pub call: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub world: WorldState,
    pub attempts: u32,
    pub success: bool,
    pub outcomes: Vec<StepOutcome>,
    /// Largest change in any substance total seen across a step.
    pub conservation_error: f64,
}

fn totals_delta(before: &WorldState, after: &WorldState) -> f64 {
    let (a, b) = (before.substance_totals(), after.substance_totals());
    a.keys()
        .chain(b.keys())
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .fold(0.0, f64::max)
}

/// Run the plan, retrying the whole plan from the initial snapshot up to
/// [`MAX_ATTEMPTS`] times.
pub fn execute(plan: &ActionPlan, world: &WorldState, injection: &FailureInjection) -> ExecutionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(injection.seed);
    let mut outcomes = Vec::new();
    let mut conservation_error: f64 = 0.0;
    let mut last = world.clone();
    for attempt in 1..=MAX_ATTEMPTS {
        let mut w = world.clone();
        let mut failed = false;
        for (i, step) in plan.steps.iter().enumerate() {
            let inject = injection.active(attempt) && rng.gen::<f64>() < injection.step_failure_prob;
            let result = if inject {
                Err("injected physical failure".to_string())
            } else {
                let before = w.clone();
                let r = apply_step(&mut w, step);
                conservation_error = conservation_error.max(totals_delta(&before, &w));
                r
            };
            let ok = result.is_ok();
            outcomes.push(StepOutcome {
                attempt,
                step: i,
                call: step.to_string(),
                ok,
                detail: result.unwrap_or_else(|e| e),
            });
            if !ok {
                failed = true;
                break;
            }
        }
        if !failed {
            return ExecutionReport {
                world: w,
                attempts: attempt,
                success: true,
                outcomes,
                conservation_error,
            };
        }
        last = w;
    }
    ExecutionReport {
        world: last,
        attempts: MAX_ATTEMPTS,
        success: false,
        outcomes,
        conservation_error,
    }
}

/// System prompt for plan generation.
pub fn planner_system_prompt() -> String {
    let sigs: Vec<&str> = Api::ALL.iter().map(|a| a.signature()).collect();
    format!(
        "You are a robot task planner. Available operation APIs: {}. Reserved targets: {TABLE}, {USER_ZONE}. \
         Answer only with a JSON array of steps such as [{{\"api\":\"grasp\",\"args\":[\"cup\"]}}].",
        sigs.join(", ")
    )
}

pub fn planner_user_prompt(intention: &str, world: &WorldState) -> String {
    format!(
        "Objects in the scene: {}.\nIntention: {intention}.",
        world.labels().join(", ")
    )
}

/// Pull the first JSON array of steps out of a reply.
pub fn parse_plan_reply(reply: &str) -> Result<Vec<ActionStep>, String> {
    let start = reply.find('[').ok_or("no JSON array in reply")?;
    let end = reply.rfind(']').ok_or("no JSON array in reply")?;
    if end < start {
        return Err("no JSON array in reply".into());
    }
    serde_json::from_str(&reply[start..=end]).map_err(|e| e.to_string())
}

/// Ask the client for a plan, validate it, and allow one repair round.
pub fn plan(intention: &str, world: &WorldState, client: &dyn LlmClient) -> Result<ActionPlan, PlanError> {
    let source = match client.kind() {
        ClientKind::Mock => PlanSource::Mock,
        ClientKind::Http => PlanSource::Llm,
    };
    let mut messages = vec![
        ChatMessage::system(planner_system_prompt()),
        ChatMessage::user(planner_user_prompt(intention, world)),
    ];
    let mut last_problem = String::new();
    for round in 0..2 {
        let reply = client.chat(&messages)?;
        let problem = match parse_plan_reply(&reply) {
            Ok(steps) => {
                let candidate = ActionPlan {
                    steps,
                    source,
                    intention: intention.to_string(),
                };
                match validate(&candidate, world) {
                    Ok(()) => return Ok(candidate),
                    Err(v) => v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
                }
            }
            Err(e) => e,
        };
        tracing::debug!(round, %problem, "plan rejected");
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(format!(
            "That plan is invalid: {problem}. Answer only with a corrected JSON array."
        )));
        last_problem = problem;
    }
    Err(PlanError::Invalid(last_problem))
}

/// Labels that the mock planner treats as liquid sources.
const SOURCE_VESSELS: [&str; 5] = ["kettle", "bottle", "jug", "pitcher", "watering_can"];

/// Canonical plans for the intention phrasings the mock language model emits.
pub fn canonical_plan(intention: &str, labels: &[String]) -> Option<Vec<ActionStep>> {
    use Api::*;
    let text = intention.trim().trim_end_matches('.').to_lowercase();
    let source = || {
        SOURCE_VESSELS
            .iter()
            .find(|v| labels.iter().any(|l| l == *v))
            .map(|s| s.to_string())
            .unwrap_or_else(|| "kettle".to_string())
    };
    let pour_into = |src: &str, dst: &str| {
        vec![
            ActionStep::new(Locate, &[src]),
            ActionStep::new(Grasp, &[src]),
            ActionStep::new(MoveTo, &[dst]),
            ActionStep::new(Pour, &[src, dst]),
            ActionStep::new(Place, &[TABLE]),
            ActionStep::new(Release, &[]),
        ]
    };
    if let Some(dst) = text.strip_prefix("pour water into the ") {
        return Some(pour_into(&source(), dst));
    }
    if let Some(dst) = text.strip_prefix("water the ") {
        return Some(pour_into(&source(), dst));
    }
    if let Some(x) = text.strip_prefix("fetch the ") {
        return Some(vec![
            ActionStep::new(Locate, &[x]),
            ActionStep::new(Grasp, &[x]),
            ActionStep::new(MoveTo, &[USER_ZONE]),
            ActionStep::new(Place, &[USER_ZONE]),
            ActionStep::new(Release, &[]),
        ]);
    }
    if let Some(rest) = text.strip_prefix("put the ") {
        let (x, c) = rest.split_once(" into the ")?;
        return Some(vec![
            ActionStep::new(Locate, &[x]),
            ActionStep::new(Grasp, &[x]),
            ActionStep::new(MoveTo, &[c]),
            ActionStep::new(Place, &[c]),
            ActionStep::new(Release, &[]),
        ]);
    }
    if let Some(s) = text.strip_prefix("toggle the ") {
        return Some(vec![
            ActionStep::new(Locate, &[s]),
            ActionStep::new(MoveTo, &[s]),
            ActionStep::new(Toggle, &[s]),
        ]);
    }
    None
}
