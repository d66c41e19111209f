use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::tools::{enforce_tool_policy, PolicyViolation, ToolInvocation};
use super::{AgentRole, AgentSpec};
use crate::llm_backend::{
    BackendError, CallKey, ChatBackend, ChatMessage, ChatRequest, Reply, ToolCall,
};
use crate::needs_memo::NeedId;
use crate::protocol::{parse_control_tokens, ControlToken, ParsedTokens};

/// A broken rule that earns the agent a corrective retry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DisallowedTool { violation: PolicyViolation },
    ToolRoundsExhausted { rounds: u32 },
    MissingToken { expected: Vec<ControlToken> },
    UnexpectedToken { found: Vec<ControlToken>, expected: Vec<ControlToken> },
    DuplicateMilestone { text: String },
    PlanWithoutNeeds,
    PlanRequired,
    BatchTooLarge { count: usize, limit: usize },
    BadRanking { reason: String },
    NoSolutionWritten,
    UngroundedSolution { dangling: Vec<NeedId> },
}

fn surfaces(tokens: &[ControlToken]) -> String {
    tokens
        .iter()
        .map(|t| t.surface())
        .collect::<Vec<_>>()
        .join(" or ")
}

impl Violation {
    /// Prompt fragments locating the rule that was broken.
    fn anchors(&self) -> Vec<String> {
        let token_anchors = |tokens: &[ControlToken]| {
            let mut v = vec!["must generate".to_string(), "MUST generate".to_string()];
            v.extend(tokens.iter().map(|t| format!("`{}`", t.surface())));
            v
        };
        match self {
            Violation::DisallowedTool { .. } => vec!["You can only call functions".into()],
            Violation::ToolRoundsExhausted { .. } => vec!["must generate".into(), "MUST generate".into()],
            Violation::MissingToken { expected } => token_anchors(expected),
            Violation::UnexpectedToken { expected, .. } if expected.is_empty() => {
                vec!["generate a json-formatted text".into()]
            }
            Violation::UnexpectedToken { expected, .. } => token_anchors(expected),
            Violation::DuplicateMilestone { .. } => {
                vec!["cannot set milestones that have already been established".into()]
            }
            Violation::PlanWithoutNeeds => vec!["is empty, the first milestone should be".into()],
            Violation::PlanRequired => vec!["manually updated their requirements".into()],
            Violation::BatchTooLarge { .. } => vec!["3~4 questions".into()],
            Violation::BadRanking { .. } => vec!["generate a json-formatted text".into()],
            Violation::NoSolutionWritten => vec!["`write_solution` function".into()],
            Violation::UngroundedSolution { .. } => vec!["do not fabricate them".into()],
        }
    }

    /// The corrective note appended before a retry.
    pub fn corrective_note(&self, spec: &AgentSpec) -> String {
        let anchors = self.anchors();
        let needles: Vec<&str> = anchors.iter().map(String::as_str).collect();
        let mut note = format!("Your previous response was rejected: {self}.");
        if let Some(rule) = spec.rule_line(&needles) {
            note.push_str(&format!("\nRule: \"{rule}\""));
        }
        note.push_str("\nRespond again and follow the rule.");
        note
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DisallowedTool { violation } => write!(f, "{violation}"),
            Violation::ToolRoundsExhausted { rounds } => {
                write!(f, "no final answer after {rounds} rounds of function calls")
            }
            Violation::MissingToken { expected } => {
                write!(f, "the message must end with {}", surfaces(expected))
            }
            Violation::UnexpectedToken { found, expected } if expected.is_empty() => {
                write!(f, "{} is not expected here", surfaces(found))
            }
            Violation::UnexpectedToken { found, expected } => write!(
                f,
                "found {}, but exactly one of {} is expected here",
                surfaces(found),
                surfaces(expected)
            ),
            Violation::DuplicateMilestone { text } => {
                write!(f, "the milestone \"{text}\" has already been established")
            }
            Violation::PlanWithoutNeeds => {
                f.write_str("planning cannot begin while the user wants no recorded needs")
            }
            Violation::PlanRequired => f.write_str(
                "the user has asked for the solution to be updated now, so [BeginPlan] is required",
            ),
            Violation::BatchTooLarge { count, limit } => {
                write!(f, "{count} questions were asked at once, the limit is {limit}")
            }
            Violation::BadRanking { reason } => write!(f, "the grouping JSON is invalid: {reason}"),
            Violation::NoSolutionWritten => {
                f.write_str("the solution was not saved with write_solution")
            }
            Violation::UngroundedSolution { dangling } => write!(
                f,
                "the solution cites Need IDs that are not wanted needs in the memo: {}",
                dangling
                    .iter()
                    .map(|id| format!("Need ID: {id}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("policy violation after {retries} retries: {violation}")]
    PolicyViolation { violation: PolicyViolation, retries: u32 },
    #[error("{role} produced no valid terminal token after {retries} retries: {last}")]
    ProtocolTimeout {
        role: AgentRole,
        retries: u32,
        last: Violation,
    },
    #[error("milestone \"{text}\" re-issued after {retries} retries")]
    DuplicateMilestone { text: String, retries: u32 },
    #[error("{role} output rejected after {retries} retries: {violation}")]
    InvalidOutput {
        role: AgentRole,
        violation: Violation,
        retries: u32,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::PolicyViolation { .. } => "PolicyViolation",
            AgentError::ProtocolTimeout { .. } => "ProtocolTimeout",
            AgentError::DuplicateMilestone { .. } => "DuplicateMilestone",
            AgentError::InvalidOutput { .. } => "InvalidOutput",
            AgentError::Backend(e) => e.code(),
        }
    }

    fn exhausted(role: AgentRole, violation: Violation, retries: u32) -> Self {
        match violation {
            Violation::DisallowedTool { violation } => AgentError::PolicyViolation { violation, retries },
            Violation::DuplicateMilestone { text } => AgentError::DuplicateMilestone { text, retries },
            last @ (Violation::MissingToken { .. }
            | Violation::UnexpectedToken { .. }
            | Violation::ToolRoundsExhausted { .. }) => AgentError::ProtocolTimeout {
                role,
                retries,
                last,
            },
            violation => AgentError::InvalidOutput {
                role,
                violation,
                retries,
            },
        }
    }
}

/// Result of executing one tool against session state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutcome {
    pub content: String,
    pub ok: bool,
}

/// A final text response awaiting host validation.
#[derive(Debug)]
pub struct TurnDraft<'a> {
    pub raw: &'a str,
    pub parsed: &'a ParsedTokens,
}

/// Session-side services a turn needs.
pub trait TurnHost: Send {
    /// Key for the next backend call made by `role`.
    fn next_call_key(&mut self, role: AgentRole) -> CallKey;
    fn execute(&mut self, role: AgentRole, invocation: &ToolInvocation) -> ToolOutcome;
    /// Turn-specific checks on a final response with acceptable tokens.
    fn validate(&mut self, _role: AgentRole, _draft: &TurnDraft<'_>) -> Result<(), Violation> {
        Ok(())
    }
    /// Called before each attempt, including the first.
    fn begin_attempt(&mut self, _role: AgentRole, _attempt: u32) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedCall {
    pub call: ToolCall,
    pub invocation: ToolInvocation,
    pub result: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTurnResult {
    pub role: AgentRole,
    /// Final message with control tokens removed.
    pub visible_text: String,
    pub raw_text: String,
    pub tokens: Vec<ControlToken>,
    /// Calls executed during the accepted attempt.
    pub tool_calls_executed: Vec<ExecutedCall>,
    pub retries_used: u32,
    pub backend_calls: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOptions {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl Default for TurnOptions {
    fn default() -> Self {
        Self {
            model: String::new(),
            temperature: 0.0,
            max_tokens: 4096,
        }
    }
}

fn check_tokens(parsed: &ParsedTokens, spec: &AgentSpec, expect: &[ControlToken]) -> Result<(), Violation> {
    let found: Vec<ControlToken> = parsed
        .tokens()
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let foreign = found.iter().any(|t| !spec.terminal_tokens.contains(t));
    if expect.is_empty() {
        return if found.is_empty() {
            Ok(())
        } else {
            Err(Violation::UnexpectedToken {
                found,
                expected: Vec::new(),
            })
        };
    }
    match found.as_slice() {
        [] => Err(Violation::MissingToken {
            expected: expect.to_vec(),
        }),
        [one] if expect.contains(one) && !foreign => Ok(()),
        _ => Err(Violation::UnexpectedToken {
            found,
            expected: expect.to_vec(),
        }),
    }
}

fn tool_error(code: &str, message: &str) -> String {
    json!({"status": "error", "code": code, "message": message}).to_string()
}

/// Runs one agent turn to completion.
///
/// Each attempt sends the context, executes permitted tool calls and resends
/// until the model answers with text. A text answer must carry exactly one of
/// `expect` (or no token when `expect` is empty) and pass the host's checks.
/// Any violation appends a corrective note quoting the broken rule and starts
/// a new attempt, up to `spec.max_retries` times. At most
/// `(max_tool_rounds + 1) * (max_retries + 1)` backend calls are made.
pub async fn run_agent_turn(
    spec: &AgentSpec,
    context: Vec<ChatMessage>,
    expect: &[ControlToken],
    backend: &dyn ChatBackend,
    host: &mut dyn TurnHost,
    options: &TurnOptions,
) -> Result<AgentTurnResult, AgentError> {
    let role = spec.role;
    let schemas: Vec<_> = spec.allowed_tools.iter().map(|t| t.schema()).collect();
    let mut messages = context;
    let mut backend_calls = 0u32;
    let mut last_violation = None;

    for attempt in 0..=spec.max_retries {
        host.begin_attempt(role, attempt);
        let mut executed = Vec::new();
        let mut rounds = 0u32;
        let violation = loop {
            let request = ChatRequest {
                key: host.next_call_key(role),
                model: options.model.clone(),
                messages: messages.clone(),
                tool_schemas: schemas.clone(),
                temperature: options.temperature,
                max_tokens: options.max_tokens,
            };
            let response = backend.complete(&request).await?;
            backend_calls += 1;
            match response.reply {
                Reply::ToolCalls(calls) => {
                    if rounds == spec.max_tool_rounds {
                        messages.push(ChatMessage::assistant_tool_calls(calls.clone()));
                        for call in &calls {
                            messages.push(ChatMessage::tool_result(
                                call,
                                tool_error("ToolRoundsExhausted", "no more function calls are allowed in this turn"),
                            ));
                        }
                        break Violation::ToolRoundsExhausted { rounds };
                    }
                    rounds += 1;
                    let checked: Vec<_> = calls.iter().map(|c| enforce_tool_policy(role, c)).collect();
                    messages.push(ChatMessage::assistant_tool_calls(calls.clone()));
                    if let Some(Err(v)) = checked.iter().find(|c| c.is_err()) {
                        let v = v.clone();
                        for (call, check) in calls.iter().zip(&checked) {
                            let text = match check {
                                Err(e) => tool_error("PolicyViolation", &e.to_string()),
                                Ok(_) => tool_error("NotExecuted", "another call in this batch was rejected"),
                            };
                            messages.push(ChatMessage::tool_result(call, text));
                        }
                        break Violation::DisallowedTool { violation: v };
                    }
                    for (call, invocation) in calls.into_iter().zip(checked.into_iter().flatten()) {
                        let outcome = host.execute(role, &invocation);
                        messages.push(ChatMessage::tool_result(&call, outcome.content.clone()));
                        executed.push(ExecutedCall {
                            call,
                            invocation,
                            result: outcome.content,
                            ok: outcome.ok,
                        });
                    }
                }
                Reply::Text(raw) => {
                    let parsed = parse_control_tokens(&raw);
                    let verdict = check_tokens(&parsed, spec, expect).and_then(|()| {
                        host.validate(
                            role,
                            &TurnDraft {
                                raw: &raw,
                                parsed: &parsed,
                            },
                        )
                    });
                    match verdict {
                        Ok(()) => {
                            return Ok(AgentTurnResult {
                                role,
                                visible_text: parsed.body.clone(),
                                tokens: parsed.tokens(),
                                raw_text: raw,
                                tool_calls_executed: executed,
                                retries_used: attempt,
                                backend_calls,
                            });
                        }
                        Err(v) => {
                            messages.push(ChatMessage::assistant(raw));
                            break v;
                        }
                    }
                }
            }
        };
        tracing::debug!(role = %role, attempt, violation = %violation, "agent turn rejected");
        messages.push(ChatMessage::system(violation.corrective_note(spec)));
        last_violation = Some(violation);
    }
    let violation = last_violation.expect("at least one attempt ran");
    Err(AgentError::exhausted(role, violation, spec.max_retries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentRoster, ToolName};
    use crate::llm_backend::{ChatResponse, Fixture, ScriptedBackend};
    use serde_json::Value;

    #[derive(Default)]
    struct RecordingHost {
        calls: u32,
        executed: Vec<(AgentRole, ToolName)>,
        reject_first: Option<Violation>,
    }

    impl TurnHost for RecordingHost {
        fn next_call_key(&mut self, role: AgentRole) -> CallKey {
            let key = CallKey::new("t", role.as_str(), self.calls);
            self.calls += 1;
            key
        }

        fn execute(&mut self, role: AgentRole, invocation: &ToolInvocation) -> ToolOutcome {
            self.executed.push((role, invocation.name()));
            ToolOutcome {
                content: "{\"status\":\"ok\"}".into(),
                ok: true,
            }
        }

        fn validate(&mut self, _role: AgentRole, _draft: &TurnDraft<'_>) -> Result<(), Violation> {
            match self.reject_first.take() {
                Some(v) => Err(v),
                None => Ok(()),
            }
        }
    }

    fn call(id: &str, name: &str, args: Value) -> ToolCall {
        ToolCall {
            id: id.into(),
            name: name.into(),
            args,
        }
    }

    fn script(role: AgentRole, responses: Vec<ChatResponse>) -> ScriptedBackend {
        ScriptedBackend::new(
            responses
                .into_iter()
                .enumerate()
                .map(|(i, response)| Fixture {
                    key: CallKey::new("t", role.as_str(), i as u32),
                    request_digest: None,
                    response,
                })
                .collect(),
        )
        .unwrap()
    }

    async fn run(
        role: AgentRole,
        expect: &[ControlToken],
        responses: Vec<ChatResponse>,
        host: &mut RecordingHost,
    ) -> Result<AgentTurnResult, AgentError> {
        let roster = AgentRoster::default();
        let spec = roster.spec(role);
        let backend = script(role, responses);
        let context = vec![ChatMessage::system(spec.system_prompt.clone())];
        run_agent_turn(spec, context, expect, &backend, host, &TurnOptions::default()).await
    }

    #[tokio::test]
    async fn solution_craft_two_tools_then_token() {
        let mut host = RecordingHost::default();
        let out = run(
            AgentRole::SolutionCraft,
            &[ControlToken::SolutionEnd],
            vec![
                ChatResponse::tool_calls(vec![call("a", "get_user_want_needs", json!({}))]),
                ChatResponse::tool_calls(vec![call("b", "write_solution", json!({"solution": "Plan (Need ID: 000)"}))]),
                ChatResponse::text("The plan is saved.\n[SolutionEnd]"),
            ],
            &mut host,
        )
        .await
        .unwrap();
        assert_eq!(out.tool_calls_executed.len(), 2);
        assert_eq!(out.tokens, vec![ControlToken::SolutionEnd]);
        assert_eq!(out.visible_text, "The plan is saved.");
        assert_eq!(out.retries_used, 0);
    }

    #[tokio::test]
    async fn inquiry_calling_add_is_a_policy_violation() {
        let mut host = RecordingHost::default();
        let bad = || {
            ChatResponse::tool_calls(vec![call(
                "x",
                "add_need_slot",
                json!({"need": "n", "clarify": false, "user_want": true}),
            )])
        };
        let err = run(AgentRole::Inquiry, &[ControlToken::Inquiry], vec![bad(), bad(), bad()], &mut host)
            .await
            .unwrap_err();
        match err {
            AgentError::PolicyViolation { violation, retries } => {
                assert_eq!(violation.tool, "add_need_slot");
                assert_eq!(retries, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(host.executed.is_empty());
    }

    #[tokio::test]
    async fn milestone_recovers_after_missing_token() {
        let mut host = RecordingHost::default();
        let out = run(
            AgentRole::Milestone,
            &[ControlToken::MilestoneEnd, ControlToken::BeginPlan],
            vec![
                ChatResponse::tool_calls(vec![call("a", "get_all_needs", json!({}))]),
                ChatResponse::text("Next milestone: Collect basic needs"),
                ChatResponse::text("Next milestone: Collect basic needs\n    - Explanation: memo is empty\n[MilestoneEnd]"),
            ],
            &mut host,
        )
        .await
        .unwrap();
        assert_eq!(out.tokens, vec![ControlToken::MilestoneEnd]);
        assert_eq!(out.retries_used, 1);
        assert!(out.tool_calls_executed.is_empty());
        assert!(out.visible_text.starts_with("Next milestone: Collect basic needs"));
    }

    #[tokio::test]
    async fn host_rejection_quotes_rule_and_retries() {
        let mut host = RecordingHost {
            reject_first: Some(Violation::DuplicateMilestone { text: "x".into() }),
            ..Default::default()
        };
        let roster = AgentRoster::default();
        let spec = roster.spec(AgentRole::Milestone);
        let note = Violation::DuplicateMilestone { text: "x".into() }.corrective_note(spec);
        assert!(note.contains("You **cannot set milestones that have already been established**"));
        let out = run(
            AgentRole::Milestone,
            &[ControlToken::MilestoneEnd],
            vec![
                ChatResponse::text("Next milestone: x\n[MilestoneEnd]"),
                ChatResponse::text("Next milestone: y\n[MilestoneEnd]"),
            ],
            &mut host,
        )
        .await
        .unwrap();
        assert_eq!(out.retries_used, 1);
    }

    #[tokio::test]
    async fn ranking_must_not_emit_tokens() {
        let mut host = RecordingHost::default();
        let err = run(
            AgentRole::Ranking,
            &[],
            vec![
                ChatResponse::text("{} [Inquiry]"),
                ChatResponse::text("{} [Inquiry]"),
                ChatResponse::text("{} [Inquiry]"),
            ],
            &mut host,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, AgentError::ProtocolTimeout { .. }));
    }

    #[tokio::test]
    async fn backend_errors_propagate() {
        let mut host = RecordingHost::default();
        let err = run(AgentRole::Ranking, &[], vec![], &mut host).await.unwrap_err();
        assert!(matches!(err, AgentError::Backend(BackendError::FixtureMiss { .. })));
    }

    #[tokio::test]
    async fn endless_tool_calls_hit_the_call_bound() {
        let mut host = RecordingHost::default();
        let roster = AgentRoster::default().with_limits(3, 2);
        let spec = roster.spec(AgentRole::Ranking);
        let responses: Vec<ChatResponse> = (0..50)
            .map(|i| ChatResponse::tool_calls(vec![call(&format!("c{i}"), "get_clarify_needs", json!({}))]))
            .collect();
        let backend = script(AgentRole::Ranking, responses);
        let err = run_agent_turn(
            spec,
            vec![ChatMessage::system("s")],
            &[],
            &backend,
            &mut host,
            &TurnOptions::default(),
        )
        .await
        .unwrap_err();
        assert!(matches!(
            err,
            AgentError::ProtocolTimeout {
                last: Violation::ToolRoundsExhausted { .. },
                ..
            }
        ));
        assert_eq!(host.calls, (3 + 1) * (2 + 1));
    }

    #[tokio::test]
    async fn identical_fixtures_give_identical_results() {
        let responses = || {
            vec![
                ChatResponse::tool_calls(vec![call("a", "get_user_want_needs", json!({}))]),
                ChatResponse::text("oops"),
                ChatResponse::tool_calls(vec![call("b", "write_solution", json!({"solution": "s"}))]),
                ChatResponse::text("done [SolutionEnd]"),
            ]
        };
        let mut h1 = RecordingHost::default();
        let mut h2 = RecordingHost::default();
        let a = run(AgentRole::SolutionCraft, &[ControlToken::SolutionEnd], responses(), &mut h1)
            .await
            .unwrap();
        let b = run(AgentRole::SolutionCraft, &[ControlToken::SolutionEnd], responses(), &mut h2)
            .await
            .unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }
}
