use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use needcraft_core::agents::{AgentError, AgentRole, PromptPack};
use needcraft_core::llm_backend::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, MessageRole, SimulatedBackend, SimulationConfig,
};
use needcraft_core::needs_memo::{MemoError, NeedId, UserEdit, WantStatus};
use needcraft_core::orchestrator::{
    load_solution, numbered_answers, Orchestrator, Phase, SessionChange, SessionError, SessionMode,
    SessionObserver, SessionState, UiEvent, UserInput,
};
use needcraft_core::protocol::validate_solution_refs;

const HAWAII: &str = "Plan a 5-day trip to Hawaii";

#[derive(Default)]
struct Log {
    changes: Mutex<Vec<SessionChange>>,
    events: Mutex<Vec<UiEvent>>,
}

impl SessionObserver for Log {
    fn on_change(&self, _: &str, change: &SessionChange) {
        self.changes.lock().unwrap().push(change.clone());
    }
    fn on_event(&self, _: &str, event: &UiEvent) {
        self.events.lock().unwrap().push(event.clone());
    }
}

fn engine_with(backend: impl ChatBackend + 'static) -> Orchestrator {
    Orchestrator::new(&PromptPack::builtin(), Arc::new(backend))
}

fn engine(seed: u64) -> Orchestrator {
    engine_with(SimulatedBackend::new(SimulationConfig::seeded(seed)))
}

fn phases(events: &[UiEvent]) -> Vec<&'static str> {
    events
        .iter()
        .filter_map(|e| match e {
            UiEvent::PhaseChanged { phase } => Some(phase.name()),
            _ => None,
        })
        .collect()
}

fn posted(events: &[UiEvent]) -> usize {
    events.iter().filter(|e| matches!(e, UiEvent::QuestionsPosted { .. })).count()
}

async fn answer(orch: &Orchestrator, s: &mut SessionState, text: &str) -> Vec<UiEvent> {
    let n = s.posted.as_ref().map_or(0, |b| b.questions.len());
    orch.handle_user_message(s, UserInput::message(numbered_answers(n, text)))
        .await
        .unwrap()
}

async fn to_solution(orch: &Orchestrator, s: &mut SessionState) -> Vec<UiEvent> {
    let mut events = Vec::new();
    for _ in 0..20 {
        if s.phase == Phase::SolutionReady {
            return events;
        }
        events.extend(answer(orch, s, "yes please").await);
        s.check_invariants().unwrap();
    }
    panic!("no solution after 20 replies");
}

#[tokio::test]
async fn hawaii_start_reaches_inquiring_with_explicit_needs() {
    let orch = engine(1);
    let (s, events) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    assert_eq!(phases(&events), ["milestone_decision", "needs_discovery", "ranking", "inquiring"]);
    let texts: Vec<String> = s.memo.slots().map(|x| x.need.to_lowercase()).collect();
    assert!(texts.iter().any(|t| t.contains("the destination is hawaii")));
    assert!(texts.iter().any(|t| t.contains("the trip duration is 5 days")));
    let milestone_tokens: Vec<_> = s.transcript.iter().flat_map(|e| e.tokens.iter().map(|t| t.surface())).collect();
    assert_eq!(&milestone_tokens[..2], ["[MilestoneEnd]", "[DISCOVEREND]"]);
    for e in &events {
        if let UiEvent::QuestionsPosted { questions, .. } = e {
            assert!(!questions.is_empty() && questions.len() <= 4);
        }
    }
    s.check_invariants().unwrap();
}

#[tokio::test]
async fn hawaii_solution_is_grounded() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let events = to_solution(&orch, &mut s).await;
    let solution = load_solution(&s).unwrap();
    assert!(validate_solution_refs(solution, &s.memo).is_grounded());
    assert!(!solution.refs.is_empty());
    assert_eq!(s.drafting_runs, 1);
    assert!(events.contains(&UiEvent::SolutionReadyNotice));
    assert!(!events.iter().any(|e| matches!(e, UiEvent::GroundingFailure { .. })));
}

#[tokio::test]
async fn empty_query_is_rejected() {
    let err = engine(0).start_session("s", "t", "  ", SessionMode::Care).await.unwrap_err();
    assert!(matches!(err, SessionError::EmptyQuery));
    assert_eq!(err.code(), "EmptyQuery");
}

#[tokio::test]
async fn baseline_bypasses_the_agents() {
    let orch = engine(0);
    let (s, events) = orch.start_session("b", "b", HAWAII, SessionMode::Baseline).await.unwrap();
    let kinds: Vec<_> = events.iter().map(UiEvent::kind).collect();
    assert_eq!(kinds, ["agent_message", "solution_updated", "phase_changed"]);
    assert_eq!(s.phase, Phase::SolutionReady);
    assert!(s.memo.is_empty() && s.milestones.is_empty() && s.tool_executions.is_empty());
    assert!(s.solution.is_some());
    assert_eq!(s.calls_issued("baseline"), 1);
    s.check_invariants().unwrap();
}

#[tokio::test]
async fn baseline_rejects_manual_edits() {
    let orch = engine(0);
    let (mut s, _) = orch.start_session("b", "b", HAWAII, SessionMode::Baseline).await.unwrap();
    let err = orch
        .apply_manual_edit(&mut s, &UserEdit::AddManual { need: "x".into() })
        .await
        .unwrap_err();
    assert_eq!(err.code(), "WrongMode");
}

#[tokio::test]
async fn answering_a_batch_fills_each_question() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let asked = s.posted.clone().unwrap().questions.len();
    let open_before = s.memo.get_clarify_needs().len();
    let fills_before = s.tool_executions.len();
    answer(&orch, &mut s, "mid-range").await;
    let fills = s.tool_executions[fills_before..]
        .iter()
        .filter(|(_, t)| t.as_str() == "fill_need_slot")
        .count();
    assert_eq!(fills, asked);
    assert!(s.memo.get_clarify_needs().len() <= open_before - asked);
}

#[tokio::test]
async fn skip_request_goes_straight_to_the_plan() {
    let orch = engine(3);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let milestones = s.milestones.len();
    let events = orch
        .handle_user_message(&mut s, UserInput::message("just show me the plan"))
        .await
        .unwrap();
    assert_eq!(s.phase, Phase::SolutionReady);
    assert_eq!(posted(&events), 0);
    assert_eq!(s.milestones.len(), milestones);
    assert_eq!(s.drafting_runs, 1);
    let tokens: Vec<_> = s.transcript.iter().rev().flat_map(|e| e.tokens.clone()).take(3).collect();
    assert!(tokens.iter().any(|t| t.surface() == "[BeginPlan]"));
    assert!(s.memo.get_clarify_needs().iter().all(|x| !s.asked.contains(&x.id)));
}

#[tokio::test]
async fn skip_action_declines_posted_questions() {
    let orch = engine(3);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let asked: Vec<NeedId> = s.posted.clone().unwrap().questions.iter().map(|q| q.need_id).collect();
    let events = orch.handle_user_message(&mut s, UserInput::Skip).await.unwrap();
    assert_eq!(posted(&events), 0);
    assert_eq!(s.phase, Phase::SolutionReady);
    for id in asked {
        assert_eq!(s.memo.get(id).unwrap().want, WantStatus::Declined);
    }
}

#[tokio::test]
async fn skip_group_moves_on() {
    let orch = engine_with(SimulatedBackend::new(SimulationConfig {
        max_group: 2,
        questions_per_milestone: (5, 6),
        ..SimulationConfig::seeded(11)
    }));
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let first = s.pending_groups[0].clone();
    let groups = s.pending_groups.len();
    orch.handle_user_message(&mut s, UserInput::SkipGroup).await.unwrap();
    for q in &first.questions {
        assert_eq!(s.memo.get(q.need_id).unwrap().want, WantStatus::Declined);
    }
    if groups > 1 {
        assert!(matches!(s.phase, Phase::Inquiring { group: 1, batch: 0 }));
    }
    s.check_invariants().unwrap();
}

#[tokio::test]
async fn feedback_after_solution_replans_once() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    to_solution(&orch, &mut s).await;
    let (milestones, runs) = (s.milestones.len(), s.drafting_runs);
    orch.handle_user_message(&mut s, UserInput::message("make it cheaper"))
        .await
        .unwrap();
    assert_eq!(s.phase, Phase::SolutionReady);
    assert_eq!(s.drafting_runs, runs + 1);
    assert_eq!(s.milestones.len(), milestones);
}

#[tokio::test]
async fn deleting_a_wanted_need_replans_without_citing_it() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    to_solution(&orch, &mut s).await;
    let victim = s.memo.get_user_want_needs()[0].id;
    let (milestones, runs) = (s.milestones.len(), s.drafting_runs);
    let (receipt, events) = orch.apply_manual_edit(&mut s, &UserEdit::Delete { id: victim }).await.unwrap();
    assert_eq!(receipt.id, victim);
    assert_eq!(s.drafting_runs, runs + 1);
    assert_eq!(s.milestones.len(), milestones);
    let solution = load_solution(&s).unwrap();
    assert!(!solution.cited_ids().contains(&victim));
    assert!(solution.revision_basis >= receipt.revision);
    assert!(matches!(events[0], UiEvent::NeedsUpdated { .. }));
}

#[tokio::test]
async fn edit_during_inquiring_waits_for_the_batch() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let before = s.memo.revision();
    let (receipt, events) = orch
        .apply_manual_edit(&mut s, &UserEdit::AddManual { need: "Budget is mid-range.".into() })
        .await
        .unwrap();
    assert_eq!(receipt.revision, before + 1);
    assert!(matches!(s.phase, Phase::Inquiring { .. }));
    assert_eq!(phases(&events).len(), 0);
    let milestones = s.milestones.len();
    let events = answer(&orch, &mut s, "beach").await;
    assert_eq!(s.phase, Phase::SolutionReady);
    assert_eq!(s.drafting_runs, 1);
    assert_eq!(s.milestones.len(), milestones);
    assert_eq!(posted(&events), 0);
}

#[tokio::test]
async fn unknown_edit_target_changes_nothing() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let phase = s.phase;
    let revision = s.memo.revision();
    let err = orch
        .apply_manual_edit(&mut s, &UserEdit::Delete { id: NeedId::new(999) })
        .await
        .unwrap_err();
    assert!(matches!(err, SessionError::Memo(MemoError::UnknownNeedId(_))));
    assert_eq!(err.code(), "UnknownNeedId");
    assert_eq!((s.phase, s.memo.revision()), (phase, revision));
}

#[tokio::test]
async fn solution_store_rules() {
    let orch = engine(1);
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    assert!(load_solution(&s).is_none());
    let err = orch.write_solution(&mut s, "x").unwrap_err();
    assert_eq!(err.code(), "WriteOutsideDrafting");
}

#[tokio::test]
async fn messages_outside_awaiting_phases_are_rejected() {
    let orch = engine(1);
    let mut s = SessionState::new("s", "t", SessionMode::Care);
    let err = orch.handle_user_message(&mut s, UserInput::message("hi")).await.unwrap_err();
    assert_eq!(err.code(), "WrongPhase");
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let err = orch.handle_user_message(&mut s, UserInput::message(" ")).await.unwrap_err();
    assert_eq!(err.code(), "EmptyMessage");
    assert_eq!(orch.advance(&mut s).await.unwrap_err().code(), "WrongPhase");
}

#[tokio::test]
async fn change_log_replays_to_the_same_state() {
    let log = Arc::new(Log::default());
    let orch = engine(5).with_observer(log.clone());
    let (mut s, mut events) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    events.extend(to_solution(&orch, &mut s).await);
    let changes = log.changes.lock().unwrap().clone();
    let replayed = SessionState::replay("s", "hawaii", SessionMode::Care, &changes).unwrap();
    assert_eq!(replayed, s);
    assert_eq!(*log.events.lock().unwrap(), events);
}

#[tokio::test]
async fn noisy_sessions_still_complete() {
    for seed in 0..25 {
        let orch = engine_with(SimulatedBackend::new(SimulationConfig {
            noise: 0.4,
            milestones: 2,
            ..SimulationConfig::seeded(seed)
        }));
        let (mut s, mut events) = orch
            .start_session(format!("n{seed}"), format!("n{seed}"), "Help me plan a 3-day visit to Rome", SessionMode::Care)
            .await
            .unwrap();
        events.extend(to_solution(&orch, &mut s).await);
        s.check_invariants().unwrap();
        assert!(validate_solution_refs(load_solution(&s).unwrap(), &s.memo).is_grounded());
        let keys: BTreeSet<String> = s.milestones.iter().map(|m| m.text.to_lowercase()).collect();
        assert_eq!(keys.len(), s.milestones.len());
        for e in &events {
            if let UiEvent::QuestionsPosted { questions, .. } = e {
                assert!(questions.len() <= 4);
            }
        }
    }
}

#[tokio::test]
async fn forbidden_tool_fails_after_two_retries() {
    let orch = engine_with(SimulatedBackend::new(SimulationConfig {
        always_violate: Some(AgentRole::Milestone),
        ..SimulationConfig::seeded(0)
    }));
    let mut s = SessionState::new("s", "t", SessionMode::Care);
    let err = orch.begin(&mut s, HAWAII).await.unwrap_err();
    match &err {
        SessionError::Agent {
            phase,
            source: AgentError::PolicyViolation { retries, .. },
        } => {
            assert_eq!(*phase, Phase::MilestoneDecision);
            assert_eq!(*retries, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s.calls_issued("milestone"), 3);
    assert_eq!(s.phase, Phase::MilestoneDecision);
    assert!(s.tool_executions.is_empty());
}

/// Repeats the first milestone forever.
struct Stubborn(SimulatedBackend);

#[async_trait]
impl ChatBackend for Stubborn {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if request.key.role == "milestone" {
            return Ok(ChatResponse::text("Next milestone: Collect the basics\n[MilestoneEnd]"));
        }
        self.0.complete(request).await
    }
}

#[tokio::test]
async fn repeated_milestone_is_an_error() {
    let orch = engine_with(Stubborn(SimulatedBackend::new(SimulationConfig::seeded(1))));
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let n = s.posted.as_ref().unwrap().questions.len();
    let mut err = None;
    for _ in 0..10 {
        match orch
            .handle_user_message(&mut s, UserInput::message(numbered_answers(n, "ok")))
            .await
        {
            Ok(_) => continue,
            Err(e) => {
                err = Some(e);
                break;
            }
        }
    }
    let err = err.expect("duplicate milestone surfaces");
    assert_eq!(err.code(), "DuplicateMilestone");
    assert_eq!(s.milestones.len(), 1);
}

/// Cites an id that does not exist in every draft.
struct Fabricator(SimulatedBackend);

#[async_trait]
impl ChatBackend for Fabricator {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let last_is_tool = request.messages.last().is_some_and(|m| m.role == MessageRole::Tool);
        if request.key.role == "solution_craft" && last_is_tool
            && request.messages.last().and_then(|m| m.name.as_deref()) == Some("get_user_want_needs")
        {
            return Ok(ChatResponse::tool_calls(vec![needcraft_core::llm_backend::ToolCall {
                id: "w".into(),
                name: "write_solution".into(),
                args: serde_json::json!({"solution": "Stay at the beach. `(Need ID: 777)`"}),
            }]));
        }
        self.0.complete(request).await
    }
}

#[tokio::test]
async fn ungrounded_drafts_surface_a_grounding_failure() {
    let orch = engine_with(Fabricator(SimulatedBackend::new(SimulationConfig::seeded(1))));
    let (mut s, _) = orch.start_session("s", "hawaii", HAWAII, SessionMode::Care).await.unwrap();
    let events = orch.handle_user_message(&mut s, UserInput::Skip).await.unwrap();
    assert_eq!(s.phase, Phase::SolutionReady);
    assert!(events.contains(&UiEvent::GroundingFailure {
        dangling: vec![NeedId::new(777)]
    }));
}
