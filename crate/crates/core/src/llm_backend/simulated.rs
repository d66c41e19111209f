//! A seeded, rule-based stand-in for a chat model.
//!
//! Each role follows the workflow of its prompt: it reads the context the
//! engine assembled, calls its tools, and answers with the expected control
//! token. Output is a pure function of the seed and the request, so a
//! session can be replayed or recorded to fixtures.

use std::sync::OnceLock;

use async_trait::async_trait;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::digest::request_digest;
use super::types::{BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, MessageRole, ToolCall};
use crate::agents::directive::{is_skip_request, parse_directive, Directive};
use crate::agents::{AgentRole, DIRECTIVE_HEADER};
use crate::protocol::{ControlToken, GroupQuestion};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub seed: u64,
    /// Milestones set before planning.
    pub milestones: usize,
    /// Inclusive range of clarification questions added per milestone.
    pub questions_per_milestone: (usize, usize),
    /// Largest question group the ranking role forms.
    pub max_group: usize,
    /// Chance that the first attempt of a turn breaks a rule.
    pub noise: f64,
    /// Role that calls a forbidden tool on every attempt.
    pub always_violate: Option<AgentRole>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            milestones: 1,
            questions_per_milestone: (2, 6),
            max_group: 6,
            noise: 0.0,
            always_violate: None,
        }
    }
}

impl SimulationConfig {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimulatedBackend {
    config: SimulationConfig,
}

/// Ways a noisy first attempt goes wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    ForbiddenTool,
    MissingToken,
    RoleSpecific,
}

const TRAVEL_MILESTONES: [&str; 3] = [
    "Collect the core trip requirements",
    "Shape the daily itinerary",
    "Settle the remaining logistics",
];
const GENERIC_MILESTONES: [&str; 3] = [
    "Understand the core goal and constraints",
    "Refine preferences and priorities",
    "Settle the remaining details",
];

const TRAVEL_QUESTIONS: [&[&str]; 2] = [
    &[
        "What is your total budget for the trip?",
        "Who will be traveling with you?",
        "What type of accommodation do you prefer?",
        "Which area or region would you like to stay in?",
        "When are you planning to travel?",
        "Where will you be departing from?",
        "Do you need help booking flights?",
    ],
    &[
        "Which activities interest you most?",
        "Do you have any dietary preferences or restrictions?",
        "How relaxed or packed should each day be?",
        "How do you want to get around at the destination?",
        "Are you celebrating any special occasion on this trip?",
        "Does anyone in your group have accessibility needs?",
    ],
];
const GENERIC_QUESTIONS: [&[&str]; 2] = [
    &[
        "What outcome would make this a success for you?",
        "What is your timeline?",
        "What budget do you have available?",
        "Are there constraints you must work within?",
        "How experienced are you with this kind of task?",
        "In what format would you like the result?",
    ],
    &[
        "Which of your goals matters most?",
        "Is there anything you want to avoid?",
        "What resources can you already rely on?",
        "Who else is affected by the result?",
        "How much detail do you want in the plan?",
    ],
];
const EXTRA_QUESTIONS: [&str; 3] = [
    "Is there anything else we should take into account?",
    "Are there any preferences we have not covered yet?",
    "Would you change anything about the needs gathered so far?",
];

const TOPICS: [(&str, &str); 12] = [
    ("budget", "Budget"),
    ("accommodation", "Accommodation"),
    ("stay", "Accommodation"),
    ("travel", "Travel Logistics"),
    ("depart", "Travel Logistics"),
    ("flight", "Travel Logistics"),
    ("activit", "Activities"),
    ("dietary", "Food"),
    ("get around", "Getting Around"),
    ("timeline", "Timing"),
    ("goal", "Goals"),
    ("accessib", "Accessibility"),
];

fn pattern(cell: &'static OnceLock<Regex>, re: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(re).expect("valid pattern"))
}

fn destination_re() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    pattern(&P, r"\b(?:to|in|visit|visiting)\s+((?:[A-Z][a-zA-Z]+)(?:\s+[A-Z][a-zA-Z]+)*)")
}

fn duration_re() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    pattern(&P, r"(?i)\b(\d+)[\s-]?(day|night|week)s?\b")
}

fn budget_re() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    pattern(&P, r"\$\s?([\d,]+)")
}

fn party_re() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    pattern(&P, r"(?i)\b(\d+)\s+(people|persons|adults|friends|kids|children)\b")
}

fn numbered_re() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    pattern(&P, r"^(\d+)[.)]\s*(.*)$")
}

fn is_travel(query: &str) -> bool {
    let q = query.to_lowercase();
    ["trip", "travel", "vacation", "holiday", "visit", "itinerary"]
        .iter()
        .any(|w| q.contains(w))
}

/// Explicit needs stated in the query.
pub fn explicit_needs(query: &str) -> Vec<String> {
    let mut needs = Vec::new();
    if let Some(c) = destination_re().captures(query) {
        needs.push(format!("The destination is {}.", &c[1]));
    }
    if let Some(c) = duration_re().captures(query) {
        let n: u32 = c[1].parse().unwrap_or(1);
        let unit = c[2].to_lowercase();
        let unit = if unit == "night" { "night" } else { unit.as_str() };
        let plural = if n == 1 { "" } else { "s" };
        let what = if is_travel(query) { "trip" } else { "work" };
        needs.push(format!("The {what} duration is {n} {unit}{plural}."));
    }
    if let Some(c) = budget_re().captures(query) {
        needs.push(format!("The budget is ${}.", &c[1]));
    }
    if let Some(c) = party_re().captures(query) {
        needs.push(format!("The group consists of {} {}.", &c[1], c[2].to_lowercase()));
    }
    if needs.is_empty() {
        needs.push(format!("The user wants help with: {}", one_line(query)));
    }
    needs
}

fn is_decline(answer: &str) -> bool {
    let a = answer.trim().trim_end_matches('.').to_lowercase();
    a.is_empty()
        || ["skip", "pass", "-", "n/a", "no preference", "don't know", "dont know", "not sure", "no idea"]
            .contains(&a.as_str())
}

/// A substantive "no": the user answered, and does not want this.
fn is_negative(answer: &str) -> bool {
    let a = answer.trim().to_lowercase();
    let first = a.split(|c: char| !c.is_alphanumeric() && c != '\'').next().unwrap_or("");
    matches!(first, "no" | "nope" | "none") || a.contains("not needed") || a.contains("don't need")
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps a reply onto the asked questions: numbered lines by number, other
/// lines by position. A one-line reply may separate answers with ';'.
fn map_answers(reply: &str, count: usize) -> Vec<Option<String>> {
    let mut out = vec![None; count];
    let lines: Vec<&str> = if !reply.contains('\n') && reply.contains(';') {
        reply.split(';').collect()
    } else {
        reply.lines().collect()
    };
    let mut position = 0;
    for line in lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
        let (index, answer) = match numbered_re().captures(line) {
            Some(c) => (c[1].parse::<usize>().unwrap_or(0).wrapping_sub(1), c[2].trim().to_string()),
            None => {
                position += 1;
                (position - 1, line.to_string())
            }
        };
        if let Some(slot) = out.get_mut(index) {
            *slot = Some(answer);
        }
    }
    out
}

fn topic_for(question: &str) -> &'static str {
    let q = question.to_lowercase();
    TOPICS
        .iter()
        .find(|(needle, _)| q.contains(needle))
        .map(|(_, topic)| *topic)
        .unwrap_or("Preferences")
}

fn call(id: String, name: &str, args: Value) -> ToolCall {
    ToolCall {
        id,
        name: name.into(),
        args,
    }
}

/// The messages of the current attempt: everything after the last user
/// message or corrective note.
struct View<'a> {
    messages: &'a [ChatMessage],
    start: usize,
    retry: bool,
}

impl<'a> View<'a> {
    fn new(messages: &'a [ChatMessage]) -> Self {
        let boundary = messages
            .iter()
            .enumerate()
            .rposition(|(i, m)| m.role == MessageRole::User || (m.role == MessageRole::System && i > 0));
        let start = boundary.map_or(messages.len(), |i| i + 1);
        let retry = boundary.is_some_and(|i| messages[i].role == MessageRole::System);
        Self { messages, start, retry }
    }

    fn suffix(&self) -> &'a [ChatMessage] {
        &self.messages[self.start..]
    }

    /// Tool results of the latest round, if the attempt has had one.
    fn last_results(&self) -> Vec<&'a ChatMessage> {
        let suffix = self.suffix();
        let tail = suffix.iter().rev().take_while(|m| m.role == MessageRole::Tool).count();
        suffix[suffix.len() - tail..].iter().collect()
    }

    fn last_tool(&self) -> Option<&'a str> {
        self.last_results().last().and_then(|m| m.name.as_deref())
    }

    fn result_of(&self, tool: &str) -> Option<Value> {
        self.suffix()
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::Tool && m.name.as_deref() == Some(tool))
            .and_then(|m| serde_json::from_str(&m.content).ok())
    }

    fn rounds(&self) -> usize {
        self.suffix().iter().filter(|m| !m.tool_calls.is_empty()).count()
    }

    fn user_texts(&self) -> impl Iterator<Item = &'a str> {
        self.messages
            .iter()
            .filter(|m| m.role == MessageRole::User)
            .filter_map(|m| m.content.strip_prefix("User: "))
    }

    fn query(&self) -> String {
        self.user_texts().next().map(one_line).unwrap_or_default()
    }

    fn directive(&self) -> Option<Directive> {
        self.messages
            .iter()
            .rev()
            .filter(|m| m.role == MessageRole::User)
            .find_map(|m| m.content.strip_prefix(DIRECTIVE_HEADER))
            .and_then(|d| parse_directive(d.trim_start_matches('\n')))
    }

    /// The user's reply that precedes the directive.
    fn latest_reply(&self) -> Option<&'a str> {
        self.user_texts().last()
    }

    fn mentions(&self, token: ControlToken) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role != MessageRole::System && m.content.contains(token.surface()))
            .count()
    }

    /// The corrective note that started this attempt, on a retry.
    fn note(&self) -> Option<&'a str> {
        self.retry.then(|| self.messages[self.start - 1].content.as_str())
    }
}

fn digest_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let bytes = h.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

impl SimulatedBackend {
    pub fn new(config: SimulationConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    fn rng(&self, request: &ChatRequest) -> ChaCha8Rng {
        let digest = request_digest(request);
        ChaCha8Rng::seed_from_u64(digest_seed(&[
            &self.config.seed.to_le_bytes(),
            request.key.session.as_bytes(),
            digest.as_bytes(),
        ]))
    }

    /// Same draw for every round of one attempt.
    fn fault(&self, request: &ChatRequest, view: &View<'_>, role: AgentRole) -> Option<Fault> {
        if self.config.always_violate == Some(role) {
            return Some(Fault::ForbiddenTool);
        }
        if view.retry || self.config.noise <= 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(digest_seed(&[
            &self.config.seed.to_le_bytes(),
            request.key.session.as_bytes(),
            role.as_str().as_bytes(),
            &(view.start as u64).to_le_bytes(),
        ]));
        if !rng.random_bool(self.config.noise.clamp(0.0, 1.0)) {
            return None;
        }
        Some(*[Fault::ForbiddenTool, Fault::MissingToken, Fault::RoleSpecific]
            .choose(&mut rng)
            .expect("non-empty"))
    }

    fn call_id(request: &ChatRequest, n: usize) -> String {
        format!("call_{}_{}_{}", request.key.role, request.key.turn, n)
    }

    fn forbidden_call(request: &ChatRequest, role: AgentRole) -> ChatResponse {
        let (name, args) = match role {
            AgentRole::SolutionCraft => ("add_need_slot", json!({"need": "x", "clarify": false, "user_want": true})),
            AgentRole::Ranking => ("get_all_needs", json!({})),
            _ => ("write_solution", json!({"solution": "draft"})),
        };
        ChatResponse::tool_calls(vec![call(Self::call_id(request, 0), name, args)])
    }

    fn finish(text: String, token: ControlToken, fault: Option<Fault>) -> ChatResponse {
        if fault == Some(Fault::MissingToken) {
            ChatResponse::text(text)
        } else {
            ChatResponse::text(format!("{text}\n{}", token.surface()))
        }
    }

    fn milestone(&self, request: &ChatRequest, view: &View<'_>, fault: Option<Fault>) -> ChatResponse {
        if view.rounds() == 0 {
            return ChatResponse::tool_calls(vec![call(Self::call_id(request, 0), "get_all_needs", json!({}))]);
        }
        let query = view.query();
        let names = if is_travel(&query) { TRAVEL_MILESTONES } else { GENERIC_MILESTONES };
        let turn_start = view
            .messages
            .iter()
            .rposition(|m| m.role == MessageRole::User)
            .map_or(1, |i| i + 1);
        let earlier = &view.messages[..turn_start];
        let done = earlier
            .iter()
            .filter(|m| m.role != MessageRole::System && m.content.contains(ControlToken::MilestoneEnd.surface()))
            .count();
        let since_own = earlier
            .iter()
            .rposition(|m| m.role == MessageRole::Assistant && m.tool_calls.is_empty())
            .map_or(1, |i| i + 1);
        let replan = earlier[since_own..].iter().any(|m| {
            m.content.contains("wants to see the solution")
                || m.content.contains("manually updated their requirements")
                || m.content.contains("Your solution is ready")
        });
        let wants_empty = view
            .result_of("get_all_needs")
            .and_then(|v| v.get("User Wants Needs").and_then(Value::as_object).map(Map::is_empty))
            .unwrap_or(true);
        let plan = match view.note() {
            Some(n) if n.contains("[BeginPlan] is required") || n.contains("of [BeginPlan] is expected") => true,
            Some(n) if n.contains("planning cannot begin") || n.contains("already been established") => false,
            _ => replan || (done >= self.config.milestones && !wants_empty),
        };
        if plan && fault != Some(Fault::RoleSpecific) {
            return Self::finish(
                "All milestones needed for this request are covered. SolutionCraft-Agent, please draft the solution from the wanted needs.".into(),
                ControlToken::BeginPlan,
                fault,
            );
        }
        let name = if fault == Some(Fault::RoleSpecific) && done > 0 {
            // Re-issues the previous milestone.
            names[(done - 1).min(names.len() - 1)].to_string()
        } else if done < names.len() {
            names[done].to_string()
        } else {
            format!("{} (round {})", names[names.len() - 1], done + 1)
        };
        let explanation = if done == 0 {
            "the memo is empty, so the basic needs come first"
        } else {
            "the earlier milestones left open points"
        };
        Self::finish(
            format!("Next milestone: {name}\n    - Explanation: {explanation}\nUser query/feedback: {query}"),
            ControlToken::MilestoneEnd,
            fault,
        )
    }

    fn discovery(&self, request: &ChatRequest, view: &View<'_>, fault: Option<Fault>) -> ChatResponse {
        if view.rounds() == 0 {
            return ChatResponse::tool_calls(vec![call(Self::call_id(request, 0), "get_all_needs", json!({}))]);
        }
        if view.last_tool() == Some("add_need_slot") {
            let added = view.last_results().len();
            return Self::finish(format!("Added {added} need slot(s) to the memo."), ControlToken::DiscoverEnd, fault);
        }
        let existing: Vec<String> = view
            .result_of("get_all_needs")
            .and_then(|v| v.as_object().cloned())
            .into_iter()
            .flat_map(|parts| parts.into_iter())
            .filter_map(|(_, slots)| slots.as_object().cloned())
            .flat_map(|slots| slots.into_iter())
            .filter_map(|(_, slot)| slot.get("need").and_then(Value::as_str).map(str::to_lowercase))
            .collect();
        let known = |text: &str| {
            let t = text.to_lowercase();
            existing.iter().any(|e| e.contains(&t))
        };
        let query = view.query();
        let milestone = view.mentions(ControlToken::MilestoneEnd).saturating_sub(1);
        let mut calls = Vec::new();
        for need in explicit_needs(&query) {
            if !known(&need) {
                calls.push(json!({"need": need, "clarify": false, "user_want": true}));
            }
        }
        let bank = if is_travel(&query) { TRAVEL_QUESTIONS } else { GENERIC_QUESTIONS };
        let mut pool: Vec<&str> = bank
            .get(milestone)
            .copied()
            .unwrap_or(&EXTRA_QUESTIONS)
            .iter()
            .copied()
            .filter(|q| !known(q))
            .collect();
        let mut rng = self.rng(request);
        pool.shuffle(&mut rng);
        let (lo, hi) = self.config.questions_per_milestone;
        let want = rng.random_range(lo.min(hi)..=hi.max(lo));
        for q in pool.into_iter().take(want) {
            calls.push(json!({"need": q, "clarify": true, "user_want": null}));
        }
        if calls.is_empty() {
            return Self::finish("No new needs were found for this milestone.".into(), ControlToken::DiscoverEnd, fault);
        }
        ChatResponse::tool_calls(
            calls
                .into_iter()
                .enumerate()
                .map(|(i, args)| call(Self::call_id(request, i), "add_need_slot", args))
                .collect(),
        )
    }

    fn ranking(&self, request: &ChatRequest, view: &View<'_>, fault: Option<Fault>) -> ChatResponse {
        if view.rounds() == 0 {
            return ChatResponse::tool_calls(vec![call(Self::call_id(request, 0), "get_clarify_needs", json!({}))]);
        }
        let open: Vec<(String, String)> = view
            .result_of("get_clarify_needs")
            .and_then(|v| v.as_object().cloned())
            .unwrap_or_default()
            .into_iter()
            .map(|(id, slot)| {
                let need = slot.get("need").and_then(Value::as_str).unwrap_or_default().to_string();
                (id, need)
            })
            .collect();
        if fault == Some(Fault::RoleSpecific) {
            return ChatResponse::text("The questions are grouped by theme, from easy to hard.");
        }
        let mut rng = self.rng(request);
        let mut root = Map::new();
        let mut rest = open.as_slice();
        while !rest.is_empty() {
            let size = rng.random_range(1..=self.config.max_group.max(1)).min(rest.len());
            let (group, tail) = rest.split_at(size);
            rest = tail;
            let base = topic_for(&group[0].1);
            let mut topic = base.to_string();
            let mut n = 2;
            while root.contains_key(&topic) {
                topic = format!("{base} {n}");
                n += 1;
            }
            let entries: Map<String, Value> = group
                .iter()
                .enumerate()
                .map(|(i, (id, need))| (format!("question-{}", i + 1), json!({"need_id": id, "need": need})))
                .collect();
            root.insert(topic, Value::Object(entries));
        }
        let body = serde_json::to_string_pretty(&Value::Object(root)).expect("json");
        let text = format!("Grouped from easy to hard:\n```json\n{body}\n```");
        if fault == Some(Fault::MissingToken) {
            // Ranking has no token; a stray one is the analogous mistake.
            ChatResponse::text(format!("{text}\n{}", ControlToken::Inquiry.surface()))
        } else {
            ChatResponse::text(text)
        }
    }

    fn numbered(questions: &[GroupQuestion]) -> String {
        questions
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {}", i + 1, one_line(&q.question)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn ask(topic: &str, questions: &[GroupQuestion], fault: Option<Fault>, opener: &str) -> ChatResponse {
        let mut list = Self::numbered(questions);
        if fault == Some(Fault::RoleSpecific) {
            for i in questions.len()..=4 {
                list.push_str(&format!("\n{}. Anything else about {topic}?", i + 1));
            }
        }
        Self::finish(format!("{opener} {topic}:\n{list}"), ControlToken::Inquiry, fault)
    }

    fn inquiry(&self, request: &ChatRequest, view: &View<'_>, fault: Option<Fault>) -> ChatResponse {
        match view.directive() {
            Some(Directive::Ask { topic, questions }) => {
                Self::ask(&topic, &questions, fault, "To tailor the plan, a few questions about")
            }
            Some(Directive::Answers { topic, asked, next }) => {
                let reply = view.latest_reply().unwrap_or_default();
                let skip = is_skip_request(reply);
                if view.rounds() == 0 && !skip {
                    let calls: Vec<ToolCall> = map_answers(reply, asked.len())
                        .into_iter()
                        .zip(&asked)
                        .filter_map(|(answer, q)| answer.map(|a| (a, q)))
                        .enumerate()
                        .map(|(i, (answer, q))| {
                            let question = one_line(&q.question);
                            let (need, want) = if is_decline(&answer) {
                                (format!("The user declined to answer: {question}"), false)
                            } else {
                                let want = !is_negative(&answer);
                                (format!("{question} The user answered: {}", one_line(&answer)), want)
                            };
                            call(
                                Self::call_id(request, i),
                                "fill_need_slot",
                                json!({"need_id": q.need_id.to_string(), "need": need, "user_want": want}),
                            )
                        })
                        .collect();
                    if !calls.is_empty() {
                        return ChatResponse::tool_calls(calls);
                    }
                }
                match next {
                    Some((next_topic, questions)) if !skip => {
                        Self::ask(&next_topic, &questions, fault, "Thanks! Next, about")
                    }
                    Some(_) => Self::finish(
                        "The user does not want to answer more questions and wants to see the solution now.".into(),
                        ControlToken::BeginMilestone,
                        fault,
                    ),
                    None => Self::finish(
                        format!("The user answered the questions about {topic}. Feedback: {}", one_line(reply)),
                        ControlToken::BeginMilestone,
                        fault,
                    ),
                }
            }
            None => Self::finish("Nothing to ask.".into(), ControlToken::BeginMilestone, fault),
        }
    }

    fn solution(&self, request: &ChatRequest, view: &View<'_>, fault: Option<Fault>) -> ChatResponse {
        match view.last_tool() {
            None => ChatResponse::tool_calls(vec![call(Self::call_id(request, 0), "get_user_want_needs", json!({}))]),
            Some("get_user_want_needs") => {
                let wanted = view
                    .result_of("get_user_want_needs")
                    .and_then(|v| v.as_object().cloned())
                    .unwrap_or_default();
                let mut body = format!("# Personalized Plan\n\nThis plan answers: {}\n", view.query());
                for (i, (id, slot)) in wanted.iter().enumerate() {
                    let need = slot.get("need").and_then(Value::as_str).unwrap_or_default();
                    body.push_str(&format!(
                        "\n## {}. {}\n\n> The plan accounts for this need. `(Need ID: {id})`\n",
                        i + 1,
                        one_line(need)
                    ));
                }
                if fault == Some(Fault::RoleSpecific) {
                    body.push_str("\n> Bonus suggestion. `(Need ID: 999)`\n");
                }
                body.push_str("\nEnjoy, and tell me if anything should change.\n");
                ChatResponse::tool_calls(vec![call(
                    Self::call_id(request, 0),
                    "write_solution",
                    json!({"solution": body}),
                )])
            }
            Some(_) => Self::finish("The solution has been saved.".into(), ControlToken::SolutionEnd, fault),
        }
    }

    fn baseline(&self, view: &View<'_>) -> ChatResponse {
        let query = view.query();
        let latest = view.latest_reply().map(one_line).unwrap_or_default();
        let mut text = format!("Here is a plan for your request: {query}\n\n");
        for (i, need) in explicit_needs(&query).iter().enumerate() {
            text.push_str(&format!("{}. {need}\n", i + 1));
        }
        if latest != query {
            text.push_str(&format!("\nUpdated for your feedback: {latest}\n"));
        }
        ChatResponse::text(text)
    }
}

#[async_trait]
impl ChatBackend for SimulatedBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let view = View::new(&request.messages);
        let Some(role) = AgentRole::parse(&request.key.role) else {
            return Ok(self.baseline(&view));
        };
        let fault = self.fault(request, &view, role);
        if fault == Some(Fault::ForbiddenTool) && view.rounds() == 0 {
            return Ok(Self::forbidden_call(request, role));
        }
        let fault = fault.filter(|f| *f != Fault::ForbiddenTool);
        Ok(match role {
            AgentRole::Milestone => self.milestone(request, &view, fault),
            AgentRole::NeedsDiscovery => self.discovery(request, &view, fault),
            AgentRole::Ranking => self.ranking(request, &view, fault),
            AgentRole::Inquiry => self.inquiry(request, &view, fault),
            AgentRole::SolutionCraft => self.solution(request, &view, fault),
        })
    }
}
