//! Intention inference from the ordered list of gazed objects.
//!
//! A prompt is rendered from the labels, sent to a chat client, and the reply
//! is parsed as a numbered list of at most three intentions.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{canonical_plan, WorldState};

pub const SYSTEM_PROMPT: &str =
    "You are a personal assistant who infers what the user wants to do based on the objects they are looking at.";
pub const FORMAT_NUDGE: &str = "Answer only with a numbered list.";
pub const MAX_PROPOSALS: usize = 3;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}: {1}")]
    Status(u16, String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("client configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("gazed object sequence is empty")]
    EmptySequence,
    #[error("reply is not a numbered list after retry: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("rule table: {0}")]
    Rules(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Mock,
    Http,
}

/// A chat-completion backend. Implementations are shared across sessions.
pub trait LlmClient: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
    fn kind(&self) -> ClientKind;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazedObject {
    pub label: String,
    pub t_us: i64,
}

/// Labels in order of their first positive window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GazedObjectSequence {
    entries: Vec<GazedObject>,
}

impl GazedObjectSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut s = Self::new();
        for (i, l) in labels.iter().enumerate() {
            s.push(l.as_ref(), i as i64);
        }
        s
    }

    /// Record a positive; later sightings of a known label are ignored.
    pub fn push(&mut self, label: &str, t_us: i64) -> bool {
        if self.entries.iter().any(|e| e.label == label) {
            return false;
        }
        let at = self.entries.partition_point(|e| e.t_us <= t_us);
        self.entries.insert(
            at,
            GazedObject {
                label: label.to_string(),
                t_us,
            },
        );
        true
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }

    pub fn entries(&self) -> &[GazedObject] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub system: String,
    pub user: String,
}

impl ChatPrompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(&self.system), ChatMessage::user(&self.user)]
    }
}

pub fn build_prompt(seq: &GazedObjectSequence) -> Result<ChatPrompt, InferenceError> {
    if seq.is_empty() {
        return Err(InferenceError::EmptySequence);
    }
    Ok(ChatPrompt {
        system: SYSTEM_PROMPT.to_string(),
        user: format!(
            "When the user looks at {}, in sequence, what are the possible intended actions? \
             Please provide up to three possible intentions.",
            seq.labels().join(", ")
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentProposal {
    pub rank: usize,
    pub description: String,
    pub source_objects: Vec<String>,
}

/// Labels a description refers to: each word following "the".
pub fn referenced_labels(description: &str) -> Vec<String> {
    let words: Vec<&str> = description.split_whitespace().collect();
    let mut out = Vec::new();
    for pair in words.windows(2) {
        if pair[0].eq_ignore_ascii_case("the") {
            let w = pair[1].trim_matches(|c: char| !c.is_alphanumeric() && c != '_');
            if !w.is_empty() && !out.iter().any(|o| o == w) {
                out.push(w.to_string());
            }
        }
    }
    out
}

fn strip_think(reply: &str) -> String {
    let mut s = reply.to_string();
    while let Some(a) = s.find("<think>") {
        match s[a..].find("</think>") {
            Some(b) => s.replace_range(a..a + b + "</think>".len(), ""),
            None => s.truncate(a),
        }
    }
    s
}

/// Items of a numbered list ("1." or "1)"), trailing punctuation removed,
/// at most three kept.
pub fn parse_numbered_list(reply: &str) -> Vec<String> {
    let mut items = Vec::new();
    for line in strip_think(reply).lines() {
        let t = line.trim_start();
        let digits = t.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            continue;
        }
        let rest = &t[digits..];
        let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) else {
            continue;
        };
        if !rest.starts_with(char::is_whitespace) {
            continue;
        }
        let text = rest
            .trim()
            .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')' && c != '"')
            .trim();
        if !text.is_empty() {
            items.push(text.to_string());
        }
    }
    items.truncate(MAX_PROPOSALS);
    items
}

pub fn render_numbered_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Query the client and parse the ranked intentions, retrying once with a
/// format instruction when the reply has no numbered items.
pub fn infer_intentions(
    seq: &GazedObjectSequence,
    client: &dyn LlmClient,
) -> Result<Vec<IntentProposal>, InferenceError> {
    let prompt = build_prompt(seq)?;
    let mut messages = prompt.messages();
    let mut reply = client.chat(&messages)?;
    let mut items = parse_numbered_list(&reply);
    if items.is_empty() {
        messages.push(ChatMessage::assistant(reply.clone()));
        messages.push(ChatMessage::user(FORMAT_NUDGE));
        reply = client.chat(&messages)?;
        items = parse_numbered_list(&reply);
    }
    if items.is_empty() {
        return Err(InferenceError::Unparseable(reply));
    }
    let labels = seq.labels();
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, description)| {
            let refs = referenced_labels(&description);
            IntentProposal {
                rank: i + 1,
                source_objects: labels.iter().filter(|l| refs.contains(l)).cloned().collect(),
                description,
            }
        })
        .collect())
}

/// One row of the mock rule table. `"*"` in `objects` binds any one label not
/// named elsewhere in the rule, substituted for `{0}` in the intents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub objects: Vec<String>,
    pub intents: Vec<String>,
}

impl MockRule {
    fn new(objects: &[&str], intents: &[&str]) -> Self {
        Self {
            objects: objects.iter().map(|s| s.to_string()).collect(),
            intents: intents.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const CONTAINER_LABELS: [&str; 3] = ["bowl", "box", "cup"];

pub fn default_rules() -> Vec<MockRule> {
    let mut rules = vec![
        MockRule::new(
            &["kettle", "cup"],
            &["pour water into the cup", "fetch the kettle", "fetch the cup"],
        ),
        MockRule::new(&["kettle", "plant"], &["water the plant", "fetch the kettle"]),
        MockRule::new(&["switch"], &["toggle the switch"]),
    ];
    for c in CONTAINER_LABELS {
        rules.push(MockRule {
            objects: vec!["*".into(), c.into()],
            intents: vec![format!("put the {{0}} into the {c}"), "fetch the {0}".into()],
        });
    }
    rules.push(MockRule::new(&["*"], &["fetch the {0}"]));
    rules
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct MatchScore {
    exact: bool,
    covered: usize,
    literals: usize,
}

/// Deterministic offline stand-in for a chat model.
#[derive(Debug, Clone)]
pub struct MockLlm {
    rules: Vec<MockRule>,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self::new(default_rules())
    }
}

impl MockLlm {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    pub fn from_json(text: &str) -> Result<Self, InferenceError> {
        let rules: Vec<MockRule> =
            serde_json::from_str(text).map_err(|e| InferenceError::Rules(e.to_string()))?;
        for r in &rules {
            if r.objects.iter().filter(|o| *o == "*").count() > 1 {
                return Err(InferenceError::Rules(format!(
                    "rule {:?} has more than one wildcard",
                    r.objects
                )));
            }
        }
        Ok(Self::new(rules))
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InferenceError::Rules(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn score(rule: &MockRule, labels: &[String]) -> Option<(MatchScore, Option<String>)> {
        let literals: BTreeSet<&str> = rule.objects.iter().map(String::as_str).filter(|o| *o != "*").collect();
        let wild = rule.objects.len() - literals.len();
        if !literals.iter().all(|l| labels.iter().any(|x| x == l)) {
            return None;
        }
        let spare = labels.iter().find(|l| !literals.contains(l.as_str())).cloned();
        if wild > 0 && spare.is_none() {
            return None;
        }
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        let covered = literals.len() + wild;
        Some((
            MatchScore {
                exact: covered == unique.len(),
                covered,
                literals: literals.len(),
            },
            spare,
        ))
    }

    /// Reply to an intention prompt.
    pub fn intention_reply(&self, labels: &[String]) -> String {
        if labels.is_empty() {
            return "I cannot tell without any objects.".into();
        }
        let mut best: Option<(MatchScore, usize, Option<String>)> = None;
        for (i, rule) in self.rules.iter().enumerate() {
            if let Some((score, bind)) = Self::score(rule, labels) {
                if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                    best = Some((score, i, bind));
                }
            }
        }
        match best {
            Some((_, i, bind)) => {
                let items: Vec<String> = self.rules[i]
                    .intents
                    .iter()
                    .map(|t| t.replace("{0}", bind.as_deref().unwrap_or("")))
                    .collect();
                render_numbered_list(&items)
            }
            None => format!("1. fetch the {}", labels[0]),
        }
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let a = text.find(start)? + start.len();
    let b = a + text[a..].find(end)?;
    Some(&text[a..b])
}

impl LlmClient for MockLlm {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let first_user = messages
            .iter()
            .find(|m| m.role == "user")
            .ok_or_else(|| LlmError::Protocol("no user message".into()))?;
        if let Some(list) = between(&first_user.content, "When the user looks at ", ", in sequence") {
            let labels: Vec<String> = list.split(", ").map(str::to_string).collect();
            return Ok(self.intention_reply(&labels));
        }
        if let (Some(objects), Some(intention)) = (
            between(&first_user.content, "Objects in the scene: ", ".\n"),
            first_user.content.split("Intention: ").nth(1),
        ) {
            let labels: Vec<String> = objects.split(", ").map(str::to_string).collect();
            let intention = intention.trim().trim_end_matches('.');
            let steps = canonical_plan(intention, &labels).unwrap_or_default();
            return serde_json::to_string(&steps).map_err(|e| LlmError::Protocol(e.to_string()));
        }
        Ok("I do not understand the request.".into())
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Mock
    }
}

/// Client that returns canned replies in order; for exercising retry paths.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    replies: Mutex<VecDeque<String>>,
    calls: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedLlm {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls.lock().expect("lock").clone()
    }
}

impl LlmClient for ScriptedLlm {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        self.calls.lock().expect("lock").push(messages.to_vec());
        self.replies
            .lock()
            .expect("lock")
            .pop_front()
            .ok_or_else(|| LlmError::Transport("script exhausted".into()))
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Http
    }
}

/// Drop proposals that mention objects missing from the world. Returns the
/// kept proposals re-ranked from 1 and the dropped descriptions.
pub fn filter_proposals(
    proposals: Vec<IntentProposal>,
    world: &WorldState,
) -> (Vec<IntentProposal>, Vec<String>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for p in proposals {
        if referenced_labels(&p.description).iter().all(|l| world.exists(l)) {
            kept.push(IntentProposal {
                rank: kept.len() + 1,
                ..p
            });
        } else {
            dropped.push(p.description);
        }
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn infer(ls: &[&str]) -> Vec<String> {
        infer_intentions(&GazedObjectSequence::from_labels(ls), &MockLlm::default())
            .unwrap()
            .into_iter()
            .map(|p| p.description)
            .collect()
    }

    #[test]
    fn prompt_is_byte_exact() {
        let p = build_prompt(&GazedObjectSequence::from_labels(&["kettle", "cup"])).unwrap();
        assert_eq!(
            p.system,
            "You are a personal assistant who infers what the user wants to do based on the objects they are looking at."
        );
        assert_eq!(
            p.user,
            "When the user looks at kettle, cup, in sequence, what are the possible intended actions? Please provide up to three possible intentions."
        );
        let p = build_prompt(&GazedObjectSequence::from_labels(&["banana"])).unwrap();
        assert!(p.user.contains("looks at banana, in sequence"));
        assert!(matches!(
            build_prompt(&GazedObjectSequence::new()),
            Err(InferenceError::EmptySequence)
        ));
    }

    #[test]
    fn sequence_keeps_first_occurrence_in_time_order() {
        let mut s = GazedObjectSequence::new();
        s.push("cup", 200);
        s.push("kettle", 100);
        assert!(!s.push("cup", 50));
        assert_eq!(s.labels(), labels(&["kettle", "cup"]));
    }

    #[test]
    fn mock_rule_table() {
        assert_eq!(infer(&["kettle", "cup"]), ["pour water into the cup", "fetch the kettle", "fetch the cup"]);
        assert_eq!(infer(&["kettle", "plant"])[0], "water the plant");
        assert_eq!(infer(&["switch"]), ["toggle the switch"]);
        assert_eq!(infer(&["banana", "bowl"]), ["put the banana into the bowl", "fetch the banana"]);
        assert_eq!(infer(&["stapler"]), ["fetch the stapler"]);
    }

    #[test]
    fn fallback_without_rules() {
        let m = MockLlm::new(vec![]);
        assert_eq!(m.intention_reply(&labels(&["stapler", "cup"])), "1. fetch the stapler");
    }

    #[test]
    fn rule_file_format() {
        let m = MockLlm::from_json(r#"[{"objects":["lamp"],"intents":["turn on the lamp"]}]"#).unwrap();
        assert_eq!(m.intention_reply(&labels(&["lamp"])), "1. turn on the lamp");
        assert!(MockLlm::from_json(r#"[{"objects":["*","*"],"intents":[]}]"#).is_err());
    }

    #[test]
    fn five_items_trimmed_to_three() {
        let items = parse_numbered_list("1. a\n2. b.\n3) c!\n4. d\n5. e");
        assert_eq!(items, ["a", "b", "c"]);
    }

    #[test]
    fn think_block_and_prose_ignored() {
        let items = parse_numbered_list("<think>1. not this</think>Sure:\n 1. fetch the cup.\n2. x\nthat's all");
        assert_eq!(items, ["fetch the cup", "x"]);
    }

    #[test]
    fn retry_once_then_fail() {
        let c = ScriptedLlm::new(["no idea", "1. fetch the cup"]);
        let p = infer_intentions(&GazedObjectSequence::from_labels(&["cup"]), &c).unwrap();
        assert_eq!(p[0].description, "fetch the cup");
        assert_eq!(p[0].source_objects, ["cup"]);
        let calls = c.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[1].last().unwrap().content, FORMAT_NUDGE);

        let c = ScriptedLlm::new(["no idea", "still none"]);
        assert!(matches!(
            infer_intentions(&GazedObjectSequence::from_labels(&["cup"]), &c),
            Err(InferenceError::Unparseable(_))
        ));
    }

    #[test]
    fn mock_answers_planner_prompt() {
        let msgs = vec![
            ChatMessage::system("planner"),
            ChatMessage::user("Objects in the scene: switch.\nIntention: toggle the switch."),
        ];
        let reply = MockLlm::default().chat(&msgs).unwrap();
        assert_eq!(
            reply,
            r#"[{"api":"locate","args":["switch"]},{"api":"move_to","args":["switch"]},{"api":"toggle","args":["switch"]}]"#
        );
    }

    #[test]
    fn referenced_labels_of_intents() {
        assert_eq!(referenced_labels("pour water into the cup"), ["cup"]);
        assert_eq!(referenced_labels("put the banana into the bowl"), ["banana", "bowl"]);
    }

    fn label_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-z]{1,6}", 1..5).prop_map(|v| {
            let mut seen = Vec::new();
            for l in v {
                if !seen.contains(&l) {
                    seen.push(l);
                }
            }
            seen
        })
    }

    proptest! {
        #[test]
        fn prompt_injective(a in label_strategy(), b in label_strategy()) {
            let pa = build_prompt(&GazedObjectSequence::from_labels(&a)).unwrap();
            let pb = build_prompt(&GazedObjectSequence::from_labels(&b)).unwrap();
            prop_assert_eq!(a == b, pa.user == pb.user);
        }

        #[test]
        fn parse_render_idempotent(items in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,4}", 1..4)) {
            let text = render_numbered_list(&items);
            let parsed = parse_numbered_list(&text);
            prop_assert_eq!(&parsed, &items);
            prop_assert_eq!(render_numbered_list(&parsed), text);
        }

        #[test]
        fn mock_deterministic_and_bounded(ls in label_strategy()) {
            let seq = GazedObjectSequence::from_labels(&ls);
            let a = infer_intentions(&seq, &MockLlm::default()).unwrap();
            let b = infer_intentions(&seq, &MockLlm::default()).unwrap();
            prop_assert!((1..=3).contains(&a.len()));
            prop_assert_eq!(a, b);
        }
    }
}
