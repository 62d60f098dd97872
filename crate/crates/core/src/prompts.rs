//! Command parsing and the prompt / motion-history protocol.
//!
//! User text is either a fresh command (it names a verb) or one of four
//! refinements of the current prompt:
//!
//! | phrase                                   | effect                                   |
//! |------------------------------------------|------------------------------------------|
//! | "slow down", "slower"                    | speed one level down (fast→normal→slow)  |
//! | "speed up", "faster"                     | speed one level up (slow→normal→fast)    |
//! | "use the other leg/arm/hand/side"        | flip the side                            |
//! | "go the other way", "turn around"        | flip heading, or side for side steps     |
//!
//! Prompts are declarative sentences ("A person is kicking slowly.") rendered
//! from a [`CommandSpec`]; parsing a prompt gives back the same spec, which
//! is how prompts map to motion programs.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{vocabulary, Heading, MotionProgram, Side, Verb};

/// System message sent to an external chat model. The model must answer in
/// the protocol this text defines, so it is kept word for word.
pub const SYSTEM_PROMPT: &str = "Your role is to generate prompts for a motion model. You have to continuously create/update the original prompt based on user input \"command\" and recover a motion \"closest_prompt_in_history\" from a history of generated prompts \"motion_history\" that resemble the generated prompt. If the motions in the history are completely unrelated to the generated prompt, return \"None\". Your prompts describe the actions of a person. Examples of prompts:
1. A person is walking forward
2. A person is hopping forward then turning around and hopping back to the start.
The user commands will have the format: <command>
You should return :
- <prompt>
- <closest_prompt_in_history>
- <motion_history>
\"motion_history\"is a list of the motion history that includes the generated\"prompt\". \"closest_prompt_in_history\" can be \"None\" if none of the motions are similar enough to the prompt. For example, jumping is very different from walking. But walking slow is similar to walking fast.Wait for the next user input.";

/// Appended to the system message so replies are machine-readable.
pub const REPLY_FORMAT: &str = "Reply with a single JSON object with keys \"prompt\" (string), \"closest_prompt_in_history\" (string or null) and \"motion_history\" (array of strings).";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("empty command")]
    Empty,
    #[error("no known verb in {text:?}; vocabulary: {}", vocabulary.join(", "))]
    UnknownVerb { text: String, vocabulary: Vec<String> },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Slow,
    #[default]
    Normal,
    Fast,
}

impl Speed {
    pub fn slower(self) -> Self {
        match self {
            Speed::Fast => Speed::Normal,
            _ => Speed::Slow,
        }
    }

    pub fn faster(self) -> Self {
        match self {
            Speed::Slow => Speed::Normal,
            _ => Speed::Fast,
        }
    }

    fn level(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Side,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub verb: Verb,
    pub speed: Speed,
    pub direction: Option<Direction>,
    pub side: Option<Side>,
    pub raw: String,
    /// Words that looked like modifiers but were not understood.
    pub warnings: Vec<String>,
}

impl CommandSpec {
    pub fn new(verb: Verb) -> Self {
        Self { verb, speed: Speed::Normal, direction: None, side: None, raw: String::new(), warnings: Vec::new() }
    }

    /// The fields that decide prompt identity.
    pub fn canonical(&self) -> (Verb, Speed, Option<Direction>, Option<Side>) {
        (self.verb, self.speed, self.direction, self.side)
    }

    /// Declarative prompt sentence.
    pub fn render(&self) -> String {
        let side = self.side.map(|s| match s {
            Side::Left => "left",
            Side::Right => "right",
        });
        let mut s = String::from("A person is ");
        match self.verb {
            Verb::Walk => s.push_str("walking"),
            Verb::Hop => s.push_str("hopping"),
            Verb::Kick => {
                s.push_str("kicking");
                if let Some(side) = side {
                    s.push_str(&format!(" with the {side} leg"));
                }
            }
            Verb::Wave => {
                s.push_str("waving");
                if let Some(side) = side {
                    s.push_str(&format!(" the {side} hand"));
                }
            }
            Verb::RaiseHand => {
                s.push_str("standing still and raising ");
                match side {
                    Some(side) => s.push_str(&format!("the {side} hand")),
                    None => s.push_str("a hand"),
                }
            }
            Verb::SideStep => match side {
                Some(side) => s.push_str(&format!("stepping to the {side}")),
                None => s.push_str("stepping to the side"),
            },
            Verb::Celebrate => s.push_str("celebrating"),
            Verb::Stand => s.push_str("standing still"),
        }
        match self.direction {
            Some(Direction::Forward) => s.push_str(" forward"),
            Some(Direction::Backward) => s.push_str(" backward"),
            Some(Direction::Side) if self.verb != Verb::SideStep => s.push_str(" sideways"),
            _ => {}
        }
        match self.speed {
            Speed::Slow => s.push_str(" slowly"),
            Speed::Fast => s.push_str(" fast"),
            Speed::Normal => {}
        }
        s.push('.');
        s
    }

    /// Procedural program for this command.
    pub fn to_program(&self, duration: f64) -> MotionProgram {
        let mut p = MotionProgram::new(self.verb, self.verb.speed_levels()[self.speed.level()], duration);
        p.side = self.side.unwrap_or_default();
        if self.direction == Some(Direction::Backward) {
            p.heading = Heading::Backward;
        }
        p
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn has(tokens: &[String], stems: &[&str]) -> bool {
    tokens.iter().any(|t| stems.iter().any(|s| t.starts_with(s)))
}

fn has_exact(tokens: &[String], words: &[&str]) -> bool {
    tokens.iter().any(|t| words.contains(&t.as_str()))
}

fn detect_verb(t: &[String]) -> Option<Verb> {
    let side_word = has_exact(t, &["side", "sideways", "left", "right"]);
    // Most specific first: "stand still and raise your hand" is a raise.
    if has(t, &["rais"]) || (has_exact(t, &["hand", "arm"]) && has_exact(t, &["up"]) && !has(t, &["wav"])) {
        return Some(Verb::RaiseHand);
    }
    if has(t, &["sidestep"]) || (has(t, &["step"]) && side_word && !has(t, &["kick"])) {
        return Some(Verb::SideStep);
    }
    let table: [(Verb, &[&str]); 6] = [
        (Verb::Wave, &["wave", "waving", "waves", "waved"]),
        (Verb::Kick, &["kick"]),
        (Verb::Hop, &["hop", "jump"]),
        (Verb::Celebrate, &["celebrat", "cheer"]),
        (Verb::Walk, &["walk"]),
        (Verb::Stand, &["stand", "still"]),
    ];
    table.iter().find(|(_, stems)| has(t, stems)).map(|(v, _)| *v)
}

/// Verbs whose motion depends on which limb or side is used.
pub fn verb_has_side(verb: Verb) -> bool {
    matches!(verb, Verb::Kick | Verb::Wave | Verb::RaiseHand | Verb::SideStep)
}

const KNOWN_ADVERBS: &[&str] = &["slowly", "gently", "quickly", "only", "really", "early"];

/// Keyword parse of a command or prompt. Case-insensitive.
pub fn parse_command(text: &str) -> Result<CommandSpec, PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::Empty);
    }
    let t = tokens(text);
    let verb =
        detect_verb(&t).ok_or_else(|| PromptError::UnknownVerb { text: text.to_string(), vocabulary: vocabulary() })?;
    let mut spec = CommandSpec::new(verb);
    spec.raw = text.to_string();
    if has_exact(&t, &["slow", "slowly", "slower", "gently", "gentle", "calmly"]) {
        spec.speed = Speed::Slow;
    } else if has_exact(&t, &["fast", "faster", "quick", "quickly", "rapidly", "briskly"]) {
        spec.speed = Speed::Fast;
    }
    if has_exact(&t, &["backward", "backwards"]) {
        spec.direction = Some(Direction::Backward);
    } else if has_exact(&t, &["forward", "forwards", "ahead"]) {
        spec.direction = Some(Direction::Forward);
    } else if has_exact(&t, &["sideways"]) && verb != Verb::SideStep {
        spec.direction = Some(Direction::Side);
    }
    let left = has_exact(&t, &["left"]);
    let right = has_exact(&t, &["right"]);
    spec.side = match (left, right) {
        (true, false) => Some(Side::Left),
        (false, true) => Some(Side::Right),
        (true, true) => {
            spec.warnings.push("both sides named; side ignored".into());
            None
        }
        _ => None,
    };
    if spec.side.is_some() && !verb_has_side(verb) {
        spec.warnings.push(format!("side has no effect on {}", verb.name()));
        spec.side = None;
    }
    for w in &t {
        if w.len() > 3 && w.ends_with("ly") && !KNOWN_ADVERBS.contains(&w.as_str()) {
            spec.warnings.push(format!("ignored modifier {w:?}"));
        }
    }
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    SlowDown,
    SpeedUp,
    OtherSide,
    OtherWay,
}

impl Refinement {
    pub fn detect(text: &str) -> Option<Self> {
        let t = tokens(text);
        let joined = t.join(" ");
        if detect_verb(&t).is_some() {
            return None;
        }
        if joined.contains("slow down") || joined == "slower" || joined.contains("more slowly") {
            Some(Refinement::SlowDown)
        } else if joined.contains("speed up") || joined == "faster" || joined.contains("more quickly") {
            Some(Refinement::SpeedUp)
        } else if joined.contains("other leg")
            || joined.contains("other arm")
            || joined.contains("other hand")
            || joined.contains("other side")
            || joined.contains("switch sides")
        {
            Some(Refinement::OtherSide)
        } else if joined.contains("other way") || joined.contains("turn around") {
            Some(Refinement::OtherWay)
        } else {
            None
        }
    }

    pub fn apply(self, spec: &CommandSpec) -> CommandSpec {
        let mut s = spec.clone();
        match self {
            Refinement::SlowDown => s.speed = s.speed.slower(),
            Refinement::SpeedUp => s.speed = s.speed.faster(),
            Refinement::OtherSide if verb_has_side(s.verb) => s.side = Some(s.side.unwrap_or_default().flip()),
            Refinement::OtherSide => {}
            Refinement::OtherWay => {
                if s.verb == Verb::SideStep {
                    s.side = Some(s.side.unwrap_or_default().flip());
                } else {
                    s.direction = Some(match s.direction {
                        Some(Direction::Backward) => Direction::Forward,
                        _ => Direction::Backward,
                    });
                }
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserInput {
    Fresh(CommandSpec),
    Refine(Refinement),
}

pub fn parse_input(text: &str) -> Result<UserInput, PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::Empty);
    }
    match Refinement::detect(text) {
        Some(r) => Ok(UserInput::Refine(r)),
        None => parse_command(text).map(UserInput::Fresh),
    }
}

/// Similarity of two verbs, symmetric, 1 on the diagonal.
pub fn verb_affinity(a: Verb, b: Verb) -> f64 {
    use Verb::*;
    if a == b {
        return 1.0;
    }
    let (x, y) = if a <= b { (a, b) } else { (b, a) };
    match (x, y) {
        (Wave, RaiseHand) => 0.8,
        (Hop, Celebrate) => 0.6,
        (RaiseHand, Stand) => 0.5,
        (Walk, SideStep) => 0.5,
        (Wave, Stand) => 0.4,
        (Kick, Stand) => 0.3,
        _ => 0.0,
    }
}

pub const VERB_WEIGHT: f64 = 0.7;
pub const MODIFIER_WEIGHT: f64 = 0.3;
pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub score: f64,
    /// Set when either prompt failed to parse and the token-set cosine was
    /// used instead.
    pub fallback: bool,
}

pub fn similarity_detail(a: &str, b: &str) -> Similarity {
    match (parse_command(a), parse_command(b)) {
        (Ok(x), Ok(y)) => {
            let slots = [x.speed == y.speed, x.direction == y.direction, x.side == y.side];
            let overlap = slots.iter().filter(|&&m| m).count() as f64 / slots.len() as f64;
            Similarity {
                score: VERB_WEIGHT * verb_affinity(x.verb, y.verb) + MODIFIER_WEIGHT * overlap,
                fallback: false,
            }
        }
        _ => Similarity { score: token_cosine(a, b), fallback: true },
    }
}

pub fn similarity(a: &str, b: &str) -> f64 {
    similarity_detail(a, b).score
}

fn token_cosine(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = tokens(a).into_iter().collect();
    let sb: BTreeSet<String> = tokens(b).into_iter().collect();
    if sa.is_empty() || sb.is_empty() {
        return if sa == sb { 1.0 } else { 0.0 };
    }
    let inter = sa.intersection(&sb).count() as f64;
    (inter / ((sa.len() * sb.len()) as f64).sqrt()).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub command: String,
    pub ordinal: u64,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

/// Append-only list of generated prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionHistory {
    records: Vec<PromptRecord>,
}

impl MotionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn prompts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.prompt.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, prompt: &str) -> bool {
        self.records.iter().any(|r| r.prompt == prompt)
    }

    pub fn append(&mut self, prompt: String, command: String) -> u64 {
        let ordinal = self.records.last().map_or(0, |r| r.ordinal + 1);
        self.records.push(PromptRecord { prompt, command, ordinal, checkpoint: None });
        ordinal
    }

    /// Attaches a checkpoint id to the record with `ordinal`.
    pub fn set_checkpoint(&mut self, ordinal: u64, id: String) -> bool {
        match self.records.iter_mut().find(|r| r.ordinal == ordinal) {
            Some(r) => {
                r.checkpoint = Some(id);
                true
            }
            None => false,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for w in self.records.windows(2) {
            if w[1].ordinal <= w[0].ordinal {
                return Err(PromptError::Protocol("ordinals must increase".into()));
            }
        }
        if self.records.iter().any(|r| r.prompt.trim().is_empty()) {
            return Err(PromptError::Protocol("empty prompt in history".into()));
        }
        Ok(())
    }

    /// Most similar prompt scoring at least `tau`; later entries win ties.
    pub fn closest(&self, prompt: &str, tau: f64) -> Option<(String, f64)> {
        let mut best: Option<(String, f64)> = None;
        for r in &self.records {
            let s = similarity(prompt, &r.prompt);
            if s >= tau && best.as_ref().is_none_or(|(_, b)| s >= *b) {
                best = Some((r.prompt.clone(), s));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FallbackCause {
    Disabled,
    Network { detail: String },
    Malformed { detail: String },
    InvalidClosest { closest: String },
    HistoryMismatch,
    UnmappablePrompt { prompt: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecisionSource {
    Deterministic,
    Llm,
    Fallback { cause: FallbackCause, raw_reply: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDecision {
    pub prompt: String,
    pub closest_prompt_in_history: Option<String>,
    pub motion_history: MotionHistory,
    pub source: DecisionSource,
}

impl PromptDecision {
    /// Ordinal of the record this decision appended.
    pub fn ordinal(&self) -> u64 {
        self.motion_history.records().last().map_or(0, |r| r.ordinal)
    }
}

/// Deterministic protocol step: builds the new prompt, picks the closest
/// earlier prompt, and returns the history with the new prompt appended.
pub fn update_prompt(
    history: &MotionHistory,
    input: &UserInput,
    current_prompt: Option<&str>,
    raw: &str,
    tau: f64,
) -> Result<PromptDecision, PromptError> {
    let spec = match input {
        UserInput::Fresh(spec) => spec.clone(),
        UserInput::Refine(r) => {
            let current =
                current_prompt.ok_or_else(|| PromptError::Protocol("refinement without a current prompt".into()))?;
            r.apply(&parse_command(current)?)
        }
    };
    let prompt = spec.render();
    let closest = history.closest(&prompt, tau).map(|(p, _)| p);
    let mut motion_history = history.clone();
    motion_history.append(prompt.clone(), raw.to_string());
    Ok(PromptDecision {
        prompt,
        closest_prompt_in_history: closest,
        motion_history,
        source: DecisionSource::Deterministic,
    })
}

/// Single-writer protocol state: history, current prompt, threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSession {
    pub history: MotionHistory,
    pub current: Option<String>,
    pub tau: f64,
    /// (command, reply) exchanges, replayed to an external model.
    pub transcript: Vec<(String, String)>,
}

impl Default for PromptSession {
    fn default() -> Self {
        Self::new(DEFAULT_TAU)
    }
}

impl PromptSession {
    pub fn new(tau: f64) -> Self {
        Self { history: MotionHistory::new(), current: None, tau, transcript: Vec::new() }
    }

    /// Deterministic path; commits the decision to the session.
    pub fn submit(&mut self, text: &str) -> Result<PromptDecision, PromptError> {
        let input = parse_input(text)?;
        let d = update_prompt(&self.history, &input, self.current.as_deref(), text, self.tau)?;
        self.commit(text, &d);
        Ok(d)
    }

    /// External-model path with validation and deterministic fallback.
    pub fn submit_llm(&mut self, text: &str, client: &LlmClient) -> Result<PromptDecision, PromptError> {
        let d = llm_update_prompt(self, text, client)?;
        self.commit(text, &d);
        Ok(d)
    }

    fn commit(&mut self, text: &str, d: &PromptDecision) {
        self.history = d.motion_history.clone();
        self.current = Some(d.prompt.clone());
        self.transcript.push((text.to_string(), reply_json(d).to_string()));
    }
}

fn reply_json(d: &PromptDecision) -> serde_json::Value {
    serde_json::json!({
        "prompt": d.prompt,
        "closest_prompt_in_history": d.closest_prompt_in_history,
        "motion_history": d.motion_history.prompts(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmConfig {
    pub url: Option<String>,
    pub key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// JSON-lines log of every exchange.
    pub transcript_path: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self { url: None, key: None, model: "gpt-4".into(), timeout: Duration::from_secs(30), transcript_path: None }
    }
}

impl LlmConfig {
    /// Reads `WORDSMITH_LLM_URL` and `WORDSMITH_LLM_KEY`.
    pub fn from_env() -> Self {
        let nonempty = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        Self { url: nonempty("WORDSMITH_LLM_URL"), key: nonempty("WORDSMITH_LLM_KEY"), ..Self::default() }
    }
}

/// Chat-completion client for an external prompt model.
#[derive(Clone, Debug)]
pub struct LlmClient {
    pub config: LlmConfig,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Self {
        Self { config }
    }

    pub fn enabled(&self) -> bool {
        self.config.url.is_some()
    }

    fn request_body(&self, session: &PromptSession, text: &str) -> serde_json::Value {
        let mut messages = vec![serde_json::json!({
            "role": "system",
            "content": format!("{SYSTEM_PROMPT}\n\n{REPLY_FORMAT}"),
        })];
        for (cmd, reply) in &session.transcript {
            messages.push(serde_json::json!({ "role": "user", "content": cmd }));
            messages.push(serde_json::json!({ "role": "assistant", "content": reply }));
        }
        let user = serde_json::json!({
            "command": text,
            "current_prompt": session.current,
            "motion_history": session.history.prompts(),
        });
        messages.push(serde_json::json!({ "role": "user", "content": user.to_string() }));
        serde_json::json!({ "model": self.config.model, "messages": messages, "temperature": 0 })
    }

    fn call(&self, body: &serde_json::Value) -> Result<String, String> {
        let url = self.config.url.as_deref().ok_or("no endpoint")?;
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.config.timeout)).build().into();
        let mut req = agent.post(url);
        if let Some(key) = &self.config.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }

    fn log(&self, entry: &serde_json::Value) {
        if let Some(path) = &self.config.transcript_path {
            let line = format!("{entry}\n");
            let res = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()));
            if let Err(e) = res {
                log::warn!("cannot append LLM transcript {}: {e}", path.display());
            }
        }
    }
}

#[derive(Deserialize)]
struct Triple {
    prompt: String,
    closest_prompt_in_history: Option<String>,
    motion_history: Vec<String>,
}

/// Pulls the reply triple out of a chat-completion response body. Accepts
/// either an OpenAI-style envelope or the bare triple.
fn extract_triple(body: &str) -> Result<Triple, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let content = match v.pointer("/choices/0/message/content").and_then(|c| c.as_str()) {
        Some(c) => c.to_string(),
        None => v.to_string(),
    };
    let start = content.find('{').ok_or("reply has no JSON object")?;
    let end = content.rfind('}').ok_or("reply has no JSON object")?;
    let mut t: Triple =
        serde_json::from_str(&content[start..=end]).map_err(|e| format!("reply is not a protocol triple: {e}"))?;
    if t.closest_prompt_in_history.as_deref().is_some_and(|c| c.trim().eq_ignore_ascii_case("none")) {
        t.closest_prompt_in_history = None;
    }
    Ok(t)
}

fn validate_triple(t: &Triple, history: &MotionHistory) -> Result<(), FallbackCause> {
    if t.prompt.trim().is_empty() || parse_command(&t.prompt).is_err() {
        return Err(FallbackCause::UnmappablePrompt { prompt: t.prompt.clone() });
    }
    if let Some(c) = &t.closest_prompt_in_history {
        if !history.contains(c) {
            return Err(FallbackCause::InvalidClosest { closest: c.clone() });
        }
    }
    let got: BTreeSet<&str> = t.motion_history.iter().map(String::as_str).collect();
    let mut want: BTreeSet<&str> = history.records().iter().map(|r| r.prompt.as_str()).collect();
    want.insert(t.prompt.as_str());
    if got != want {
        return Err(FallbackCause::HistoryMismatch);
    }
    Ok(())
}

/// Asks the external model for the next decision. Any transport failure or
/// protocol violation falls back to [`update_prompt`], with the cause and raw
/// reply recorded in [`DecisionSource::Fallback`].
pub fn llm_update_prompt(
    session: &PromptSession,
    text: &str,
    client: &LlmClient,
) -> Result<PromptDecision, PromptError> {
    let fallback = |cause: FallbackCause, raw: Option<String>| -> Result<PromptDecision, PromptError> {
        let input = parse_input(text)?;
        let mut d = update_prompt(&session.history, &input, session.current.as_deref(), text, session.tau)?;
        d.source = DecisionSource::Fallback { cause, raw_reply: raw };
        Ok(d)
    };
    if !client.enabled() {
        return fallback(FallbackCause::Disabled, None);
    }
    let body = client.request_body(session, text);
    let raw = match client.call(&body) {
        Ok(r) => r,
        Err(detail) => {
            client.log(&serde_json::json!({ "command": text, "error": detail }));
            return fallback(FallbackCause::Network { detail }, None);
        }
    };
    client.log(&serde_json::json!({ "command": text, "reply": raw }));
    let triple = match extract_triple(&raw) {
        Ok(t) => t,
        Err(detail) => return fallback(FallbackCause::Malformed { detail }, Some(raw)),
    };
    if let Err(cause) = validate_triple(&triple, &session.history) {
        return fallback(cause, Some(raw));
    }
    let mut motion_history = session.history.clone();
    motion_history.append(triple.prompt.clone(), text.to_string());
    Ok(PromptDecision {
        prompt: triple.prompt,
        closest_prompt_in_history: triple.closest_prompt_in_history,
        motion_history,
        source: DecisionSource::Llm,
    })
}
