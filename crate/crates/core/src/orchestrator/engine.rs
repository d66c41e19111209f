use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::batching::{next_batch, NextBatch};
use super::events::{NoopObserver, SessionObserver, UiEvent};
use super::host::{Check, Ctx, EngineHost, MilestoneDraft};
use super::state::{
    Applied, ApplyError, Milestone, Phase, PostedBatch, SessionChange, SessionMode, SessionState,
};
use crate::agents::{
    assemble_context, directive, run_agent_turn, AgentError, AgentRole, AgentRoster,
    AgentTurnResult, PromptPack, Speaker, TranscriptEntry, TurnOptions, Violation,
};
use crate::llm_backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, Reply};
use crate::needs_memo::{EditReceipt, MemoError, NeedId, UserEdit, WantStatus};
use crate::protocol::{AnnotatedSolution, ControlToken, GroupQuestion, RankingOutcome};

/// Role name used in call keys for baseline completions.
pub const BASELINE_ROLE: &str = "baseline";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserInput {
    Message { text: String },
    /// Stop asking questions and plan right away.
    Skip,
    /// Decline every question in the current group.
    SkipGroup,
}

impl UserInput {
    pub fn message(text: impl Into<String>) -> Self {
        UserInput::Message { text: text.into() }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("the query is empty")]
    EmptyQuery,
    #[error("the message is empty")]
    EmptyMessage,
    #[error("{op} is not possible during {phase}")]
    WrongPhase { phase: Phase, op: &'static str },
    #[error("{op} is not available in {mode} sessions")]
    WrongMode { mode: &'static str, op: &'static str },
    #[error(transparent)]
    Memo(#[from] MemoError),
    #[error("{phase}: {source}")]
    Agent {
        phase: Phase,
        #[source]
        source: AgentError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("solutions can only be written while drafting, not during {0}")]
    WriteOutsideDrafting(Phase),
    #[error("no awaiting phase reached after {0} agent steps")]
    LoopLimit(u32),
    #[error("session state rejected a change: {0}")]
    Corrupt(String),
}

impl SessionError {
    /// Machine-readable code, equal to the error name.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::EmptyQuery => "EmptyQuery",
            SessionError::EmptyMessage => "EmptyMessage",
            SessionError::WrongPhase { .. } => "WrongPhase",
            SessionError::WrongMode { .. } => "WrongMode",
            SessionError::Memo(e) => e.code(),
            SessionError::Agent { source, .. } => source.code(),
            SessionError::Backend(e) => e.code(),
            SessionError::WriteOutsideDrafting(_) => "WriteOutsideDrafting",
            SessionError::LoopLimit(_) => "LoopLimit",
            SessionError::Corrupt(_) => "Corrupt",
        }
    }
}

impl From<ApplyError> for SessionError {
    fn from(e: ApplyError) -> Self {
        match e {
            ApplyError::Memo(m) => SessionError::Memo(m),
            other => SessionError::Corrupt(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Agent steps allowed in one operation before giving up.
    pub max_steps: u32,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            model: String::new(),
            temperature: 0.0,
            max_tokens: 4096,
            max_steps: 48,
        }
    }
}

/// Drives sessions through the agent workflow.
///
/// The orchestrator holds no per-session state; each operation takes the
/// session by mutable reference and returns the UI events it produced.
pub struct Orchestrator {
    roster: AgentRoster,
    baseline_prompt: String,
    backend: Arc<dyn ChatBackend>,
    observer: Arc<dyn SessionObserver>,
    settings: EngineSettings,
}

struct TurnOutput {
    result: Result<AgentTurnResult, AgentError>,
    milestone: Option<MilestoneDraft>,
    ranking: Option<RankingOutcome>,
    staged_solution: Option<String>,
}

fn asked_ids(batch: &[GroupQuestion]) -> BTreeSet<NeedId> {
    batch.iter().map(|q| q.need_id).collect()
}

impl Orchestrator {
    pub fn new(pack: &PromptPack, backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            roster: AgentRoster::new(pack),
            baseline_prompt: pack.baseline.clone(),
            backend,
            observer: Arc::new(NoopObserver),
            settings: EngineSettings::default(),
        }
    }

    pub fn with_observer(mut self, observer: Arc<dyn SessionObserver>) -> Self {
        self.observer = observer;
        self
    }

    pub fn with_settings(mut self, settings: EngineSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_roster(mut self, roster: AgentRoster) -> Self {
        self.roster = roster;
        self
    }

    pub fn roster(&self) -> &AgentRoster {
        &self.roster
    }

    fn options(&self) -> TurnOptions {
        TurnOptions {
            model: self.settings.model.clone(),
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
        }
    }

    /// Creates a session and runs it until it waits for the user.
    pub async fn start_session(
        &self,
        id: impl Into<String>,
        tag: impl Into<String>,
        query: &str,
        mode: SessionMode,
    ) -> Result<(SessionState, Vec<UiEvent>), SessionError> {
        if query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        let mut state = SessionState::new(id, tag, mode);
        let events = self.begin(&mut state, query).await?;
        Ok((state, events))
    }

    /// Feeds the initial query into a fresh session.
    pub async fn begin(&self, s: &mut SessionState, query: &str) -> Result<Vec<UiEvent>, SessionError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        if s.phase != Phase::AwaitUserQuery || !s.transcript.is_empty() {
            return Err(SessionError::WrongPhase {
                phase: s.phase,
                op: "start_session",
            });
        }
        let mut cx = Ctx::new(s, &*self.observer);
        let outcome = match cx.s.mode {
            SessionMode::Baseline => self.baseline_reply(&mut cx, query, true).await,
            SessionMode::Care => self.begin_care(&mut cx, query).await,
        };
        self.finish(cx, outcome)
    }

    async fn begin_care(&self, cx: &mut Ctx<'_>, query: &str) -> Result<(), SessionError> {
        // The query is relayed to the Milestone agent verbatim.
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::user(query),
        })?;
        cx.set_phase(Phase::MilestoneDecision)?;
        self.drive(cx).await
    }

    /// Runs agent phases until the session waits for the user.
    pub async fn advance(&self, s: &mut SessionState) -> Result<Vec<UiEvent>, SessionError> {
        if s.phase.awaits_user() {
            return Err(SessionError::WrongPhase {
                phase: s.phase,
                op: "advance",
            });
        }
        let mut cx = Ctx::new(s, &*self.observer);
        let outcome = self.drive(&mut cx).await;
        self.finish(cx, outcome)
    }

    pub async fn handle_user_message(
        &self,
        s: &mut SessionState,
        input: UserInput,
    ) -> Result<Vec<UiEvent>, SessionError> {
        if let UserInput::Message { text } = &input {
            if text.trim().is_empty() {
                return Err(SessionError::EmptyMessage);
            }
        }
        let wrong = |s: &SessionState| SessionError::WrongPhase {
            phase: s.phase,
            op: "handle_user_message",
        };
        let mut cx = Ctx::new(s, &*self.observer);
        let outcome = match (cx.s.mode, cx.s.phase, input) {
            (SessionMode::Baseline, Phase::SolutionReady, UserInput::Message { text }) => {
                self.baseline_reply(&mut cx, text.trim(), false).await
            }
            (SessionMode::Care, Phase::Inquiring { .. }, UserInput::Message { text })
                if directive::is_skip_request(&text) =>
            {
                match cx.commit(SessionChange::Transcript {
                    entry: TranscriptEntry::user(text.trim()),
                }) {
                    Ok(_) => self.skip_all(&mut cx).await,
                    Err(e) => Err(e.into()),
                }
            }
            (SessionMode::Care, Phase::Inquiring { .. }, UserInput::Message { text }) => {
                self.answer_batch(&mut cx, text.trim()).await
            }
            (SessionMode::Care, Phase::Inquiring { .. }, UserInput::Skip) => self.skip_all(&mut cx).await,
            (SessionMode::Care, Phase::Inquiring { .. }, UserInput::SkipGroup) => {
                self.skip_group(&mut cx).await
            }
            (SessionMode::Care, Phase::SolutionReady, UserInput::Message { text }) => {
                self.feedback(&mut cx, text.trim()).await
            }
            _ => return Err(wrong(cx.s)),
        };
        self.finish(cx, outcome)
    }

    /// Applies a needs-panel edit and schedules a re-plan, without running
    /// any agent. Follow with [`advance`](Self::advance) when the session is
    /// no longer waiting for the user.
    pub fn record_manual_edit(
        &self,
        s: &mut SessionState,
        edit: &UserEdit,
    ) -> Result<(EditReceipt, Vec<UiEvent>), SessionError> {
        if s.mode == SessionMode::Baseline {
            return Err(SessionError::WrongMode {
                mode: "baseline",
                op: "manual edit",
            });
        }
        if s.phase == Phase::AwaitUserQuery {
            return Err(SessionError::WrongPhase {
                phase: s.phase,
                op: "manual edit",
            });
        }
        let mut cx = Ctx::new(s, &*self.observer);
        let receipt = match cx.commit_memo(SessionChange::UserEdited { edit: edit.clone() })? {
            Applied::Edited(r) => r,
            other => unreachable!("user edits yield a receipt, got {other:?}"),
        };
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::agent(
                AgentRole::Inquiry,
                directive::manual_edit_relay(edit, receipt.id),
                Vec::new(),
                false,
            ),
        })?;
        let plan_requested = cx.s.plan_requested;
        cx.commit(SessionChange::Flags {
            plan_requested,
            replan_pending: true,
        })?;
        match cx.s.phase {
            Phase::SolutionReady => cx.set_phase(Phase::MilestoneDecision)?,
            Phase::Inquiring { .. } if cx.s.posted.as_ref().is_none_or(|b| b.questions.is_empty()) => {
                // Nothing left to answer in the current batch: re-plan now.
                self.close_inquiry(&mut cx, None)?;
            }
            _ => {}
        }
        Ok((receipt, cx.events))
    }

    /// Applies a needs-panel edit and runs the re-plan if the session is
    /// not waiting on answers to a posted batch.
    pub async fn apply_manual_edit(
        &self,
        s: &mut SessionState,
        edit: &UserEdit,
    ) -> Result<(EditReceipt, Vec<UiEvent>), SessionError> {
        let (receipt, mut events) = self.record_manual_edit(s, edit)?;
        if !s.phase.awaits_user() {
            events.extend(self.advance(s).await?);
        }
        Ok((receipt, events))
    }

    /// Stores a solution. Only valid while drafting.
    pub fn write_solution(&self, s: &mut SessionState, body: &str) -> Result<(), SessionError> {
        if s.phase != Phase::SolutionDrafting {
            return Err(SessionError::WriteOutsideDrafting(s.phase));
        }
        let mut cx = Ctx::new(s, &*self.observer);
        let revision_basis = cx.s.memo.revision();
        cx.commit(SessionChange::SolutionWritten {
            body: body.to_string(),
            revision_basis,
        })?;
        cx.emit(UiEvent::SolutionUpdated { revision_basis });
        Ok(())
    }

    fn finish(&self, mut cx: Ctx<'_>, outcome: Result<(), SessionError>) -> Result<Vec<UiEvent>, SessionError> {
        match outcome {
            Ok(()) => Ok(cx.events),
            Err(e) => {
                cx.emit(UiEvent::TurnFailed {
                    code: e.code().to_string(),
                    message: e.to_string(),
                });
                Err(e)
            }
        }
    }

    async fn drive(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        for _ in 0..self.settings.max_steps {
            match cx.s.phase {
                Phase::MilestoneDecision => self.milestone_step(cx).await?,
                Phase::NeedsDiscovery => self.discovery_step(cx).await?,
                Phase::Ranking => self.ranking_step(cx).await?,
                Phase::SolutionDrafting => self.drafting_step(cx).await?,
                Phase::AwaitUserQuery | Phase::Inquiring { .. } | Phase::SolutionReady => return Ok(()),
            }
        }
        Err(SessionError::LoopLimit(self.settings.max_steps))
    }

    async fn turn(
        &self,
        cx: &mut Ctx<'_>,
        role: AgentRole,
        directive: Option<String>,
        expect: &[ControlToken],
        check: Check,
    ) -> Result<TurnOutput, SessionError> {
        let spec = self.roster.spec(role);
        let context = assemble_context(spec, &cx.s.transcript, directive.as_deref());
        let mut host = EngineHost::new(cx, check);
        let result = run_agent_turn(spec, context, expect, &*self.backend, &mut host, &self.options()).await;
        if let Some(e) = host.failure.take() {
            return Err(e.into());
        }
        Ok(TurnOutput {
            result,
            milestone: host.milestone.take(),
            ranking: host.ranking.take(),
            staged_solution: host.staged_solution.take(),
        })
    }

    fn agent_failed(phase: Phase, source: AgentError) -> SessionError {
        match source {
            AgentError::Backend(e) => SessionError::Backend(e),
            source => SessionError::Agent { phase, source },
        }
    }

    fn record_turn(
        cx: &mut Ctx<'_>,
        role: AgentRole,
        result: &AgentTurnResult,
        visible: bool,
    ) -> Result<(), SessionError> {
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::agent(role, result.visible_text.clone(), result.tokens.clone(), visible),
        })?;
        if visible {
            cx.emit(UiEvent::AgentMessage {
                speaker: Speaker::Agent(role),
                text: result.visible_text.clone(),
            });
        }
        Ok(())
    }

    async fn milestone_step(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        let plan_only = cx.s.replan_pending || cx.s.plan_requested;
        let expect: &[ControlToken] = if plan_only {
            &[ControlToken::BeginPlan]
        } else {
            &[ControlToken::MilestoneEnd, ControlToken::BeginPlan]
        };
        let out = self
            .turn(cx, AgentRole::Milestone, None, expect, Check::Milestone { plan_only })
            .await?;
        let result = out.result.map_err(|e| Self::agent_failed(Phase::MilestoneDecision, e))?;
        Self::record_turn(cx, AgentRole::Milestone, &result, false)?;
        if result.tokens.contains(&ControlToken::MilestoneEnd) {
            let draft = out.milestone.expect("validated milestone is kept");
            let seq = cx.s.milestones.len() as u32;
            cx.commit(SessionChange::MilestoneAdded {
                milestone: Milestone {
                    text: draft.text,
                    explanation: draft.explanation,
                    seq,
                },
            })?;
            cx.set_phase(Phase::NeedsDiscovery)?;
        } else {
            if cx.s.plan_requested || cx.s.replan_pending {
                cx.commit(SessionChange::Flags {
                    plan_requested: false,
                    replan_pending: false,
                })?;
            }
            cx.set_phase(Phase::SolutionDrafting)?;
        }
        Ok(())
    }

    async fn discovery_step(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        let out = self
            .turn(cx, AgentRole::NeedsDiscovery, None, &[ControlToken::DiscoverEnd], Check::Discovery)
            .await?;
        let result = out.result.map_err(|e| Self::agent_failed(Phase::NeedsDiscovery, e))?;
        Self::record_turn(cx, AgentRole::NeedsDiscovery, &result, false)?;
        if cx.s.memo.get_clarify_needs().is_empty() {
            cx.set_phase(Phase::MilestoneDecision)?;
        } else {
            cx.set_phase(Phase::Ranking)?;
        }
        Ok(())
    }

    async fn ranking_step(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        let out = self.turn(cx, AgentRole::Ranking, None, &[], Check::Ranking).await?;
        let result = out.result.map_err(|e| Self::agent_failed(Phase::Ranking, e))?;
        let ranking = out.ranking.expect("validated ranking is kept");
        Self::record_turn(cx, AgentRole::Ranking, &result, false)?;
        let first = next_batch(&ranking.groups, &BTreeSet::new()).expect("ranking has questions");
        let text = self.ask_turn(cx, &first.topic, &first.questions, Phase::Ranking).await?;
        cx.commit(SessionChange::GroupsQueued {
            groups: ranking.groups,
        })?;
        self.post_batch(cx, first, Phase::Inquiring { group: 0, batch: 0 }, text)
    }

    /// Has the Inquiry agent pose a batch. Returns the accepted turn.
    async fn ask_turn(
        &self,
        cx: &mut Ctx<'_>,
        topic: &str,
        questions: &[GroupQuestion],
        phase: Phase,
    ) -> Result<AgentTurnResult, SessionError> {
        let out = self
            .turn(
                cx,
                AgentRole::Inquiry,
                Some(directive::ask_directive(topic, questions)),
                &[ControlToken::Inquiry],
                Check::Inquiry,
            )
            .await?;
        out.result.map_err(|e| Self::agent_failed(phase, e))
    }

    fn post_batch(
        &self,
        cx: &mut Ctx<'_>,
        batch: NextBatch,
        phase: Phase,
        turn: AgentTurnResult,
    ) -> Result<(), SessionError> {
        let questions: Vec<GroupQuestion> = batch
            .questions
            .into_iter()
            .filter(|q| cx.s.memo.get(q.need_id).is_some_and(|s| s.clarify))
            .collect();
        Self::record_turn(cx, AgentRole::Inquiry, &turn, true)?;
        cx.commit(SessionChange::BatchPosted {
            batch: PostedBatch {
                topic: batch.topic.clone(),
                questions: questions.clone(),
            },
        })?;
        cx.set_phase(phase)?;
        cx.emit(UiEvent::QuestionsPosted {
            topic: batch.topic,
            questions,
        });
        Ok(())
    }

    fn decline_unanswered(cx: &mut Ctx<'_>, questions: &[GroupQuestion]) -> Result<(), SessionError> {
        for q in questions {
            if cx.s.memo.get(q.need_id).is_some_and(|s| s.clarify) {
                cx.commit_memo(SessionChange::NeedFilled {
                    id: q.need_id,
                    need: format!("The user did not answer: {}", q.question),
                    want: WantStatus::Declined,
                })?;
            }
        }
        Ok(())
    }

    /// Leaves Inquiring for MilestoneDecision, optionally writing a relay.
    fn close_inquiry(&self, cx: &mut Ctx<'_>, relay: Option<String>) -> Result<(), SessionError> {
        if let Some(text) = relay {
            cx.commit(SessionChange::Transcript {
                entry: TranscriptEntry::agent(
                    AgentRole::Inquiry,
                    text,
                    vec![ControlToken::BeginMilestone],
                    false,
                ),
            })?;
        }
        cx.commit(SessionChange::GroupsCleared)?;
        cx.set_phase(Phase::MilestoneDecision)?;
        Ok(())
    }

    fn cursor(phase: Phase) -> (u32, u32) {
        match phase {
            Phase::Inquiring { group, batch } => (group, batch),
            _ => (0, 0),
        }
    }

    async fn answer_batch(&self, cx: &mut Ctx<'_>, text: &str) -> Result<(), SessionError> {
        let phase = cx.s.phase;
        let asked = cx.s.posted.clone().unwrap_or(PostedBatch {
            topic: String::new(),
            questions: Vec::new(),
        });
        let next = if cx.s.replan_pending {
            None
        } else {
            next_batch(&cx.s.pending_groups, &asked_ids(&asked.questions))
        };
        let (expect, directive): (&[ControlToken], String) = match &next {
            Some(n) => (
                &[ControlToken::Inquiry, ControlToken::BeginMilestone],
                directive::answers_directive(&asked.topic, &asked.questions, Some((&n.topic, &n.questions))),
            ),
            None => (
                &[ControlToken::BeginMilestone],
                directive::answers_directive(&asked.topic, &asked.questions, None),
            ),
        };
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::user(text),
        })?;
        let out = self
            .turn(cx, AgentRole::Inquiry, Some(directive), expect, Check::Inquiry)
            .await?;
        let result = out.result.map_err(|e| Self::agent_failed(phase, e))?;
        Self::decline_unanswered(cx, &asked.questions)?;
        match next {
            Some(n) if result.tokens.contains(&ControlToken::Inquiry) => {
                let (group, batch) = Self::cursor(phase);
                let cursor = if n.same_group {
                    Phase::Inquiring { group, batch: batch + 1 }
                } else {
                    Phase::Inquiring { group: group + 1, batch: 0 }
                };
                if n.questions.iter().any(|q| cx.s.memo.get(q.need_id).is_some_and(|s| s.clarify)) {
                    self.post_batch(cx, n, cursor, result)
                } else {
                    // Everything announced was settled during the turn.
                    Self::record_turn(cx, AgentRole::Inquiry, &result, true)?;
                    self.continue_or_close(cx, cursor).await
                }
            }
            skipped => {
                Self::record_turn(cx, AgentRole::Inquiry, &result, false)?;
                if skipped.is_some() {
                    let replan_pending = cx.s.replan_pending;
                    cx.commit(SessionChange::Flags {
                        plan_requested: true,
                        replan_pending,
                    })?;
                }
                self.close_inquiry(cx, None)?;
                self.drive(cx).await
            }
        }
    }

    /// Posts the next batch if any remain, otherwise hands over to planning.
    async fn continue_or_close(&self, cx: &mut Ctx<'_>, cursor: Phase) -> Result<(), SessionError> {
        match next_batch(&cx.s.pending_groups, &BTreeSet::new()) {
            Some(n) if !cx.s.replan_pending => {
                let turn = self.ask_turn(cx, &n.topic, &n.questions, cx.s.phase).await?;
                self.post_batch(cx, n, cursor, turn)
            }
            _ => {
                self.close_inquiry(cx, None)?;
                self.drive(cx).await
            }
        }
    }

    async fn skip_all(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        if let Some(batch) = cx.s.posted.clone() {
            Self::decline_unanswered(cx, &batch.questions)?;
        }
        let replan_pending = cx.s.replan_pending;
        cx.commit(SessionChange::Flags {
            plan_requested: true,
            replan_pending,
        })?;
        self.close_inquiry(cx, Some(directive::skip_relay()))?;
        self.drive(cx).await
    }

    async fn skip_group(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        let Some(group) = cx.s.pending_groups.first().cloned() else {
            return Err(SessionError::WrongPhase {
                phase: cx.s.phase,
                op: "skip_group",
            });
        };
        Self::decline_unanswered(cx, &group.questions)?;
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::agent(
                AgentRole::Inquiry,
                directive::skip_group_relay(&group.topic),
                Vec::new(),
                false,
            ),
        })?;
        let (g, _) = Self::cursor(cx.s.phase);
        self.continue_or_close(cx, Phase::Inquiring { group: g + 1, batch: 0 }).await
    }

    async fn feedback(&self, cx: &mut Ctx<'_>, text: &str) -> Result<(), SessionError> {
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::user(text),
        })?;
        cx.set_phase(Phase::MilestoneDecision)?;
        self.drive(cx).await
    }

    async fn drafting_step(&self, cx: &mut Ctx<'_>) -> Result<(), SessionError> {
        let out = self
            .turn(cx, AgentRole::SolutionCraft, None, &[ControlToken::SolutionEnd], Check::Drafting)
            .await?;
        let dangling = match out.result {
            Ok(result) => {
                Self::record_turn(cx, AgentRole::SolutionCraft, &result, false)?;
                None
            }
            Err(AgentError::InvalidOutput {
                violation: Violation::UngroundedSolution { dangling },
                ..
            }) if out.staged_solution.is_some() => Some(dangling),
            Err(e) => return Err(Self::agent_failed(Phase::SolutionDrafting, e)),
        };
        let body = out.staged_solution.expect("accepted drafts have a solution");
        let revision_basis = cx.s.memo.revision();
        cx.commit(SessionChange::SolutionWritten {
            body,
            revision_basis,
        })?;
        cx.emit(UiEvent::SolutionUpdated { revision_basis });
        if let Some(dangling) = dangling {
            cx.emit(UiEvent::GroundingFailure { dangling });
        }
        cx.set_phase(Phase::SolutionReady)?;
        let notice = directive::solution_ready_notice();
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::agent(AgentRole::Inquiry, notice.clone(), Vec::new(), true),
        })?;
        cx.emit(UiEvent::AgentMessage {
            speaker: Speaker::Agent(AgentRole::Inquiry),
            text: notice,
        });
        cx.emit(UiEvent::SolutionReadyNotice);
        Ok(())
    }

    async fn baseline_reply(&self, cx: &mut Ctx<'_>, text: &str, first: bool) -> Result<(), SessionError> {
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry::user(text),
        })?;
        let mut messages = vec![ChatMessage::system(self.baseline_prompt.clone())];
        for entry in &cx.s.transcript {
            messages.push(match entry.speaker {
                Speaker::User => ChatMessage::user(entry.text.clone()),
                _ => ChatMessage::assistant(entry.text.clone()),
            });
        }
        let request = ChatRequest {
            key: cx.next_call_key(BASELINE_ROLE),
            model: self.settings.model.clone(),
            messages,
            tool_schemas: Vec::new(),
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
        };
        let reply = match self.backend.complete(&request).await?.reply {
            Reply::Text(t) => t,
            Reply::ToolCalls(_) => {
                return Err(BackendError::Decode("baseline completion requested tool calls".into()).into())
            }
        };
        cx.commit(SessionChange::Transcript {
            entry: TranscriptEntry {
                speaker: Speaker::Assistant,
                text: reply.clone(),
                tokens: Vec::new(),
                visible: true,
            },
        })?;
        cx.emit(UiEvent::AgentMessage {
            speaker: Speaker::Assistant,
            text: reply.clone(),
        });
        let revision_basis = cx.s.memo.revision();
        cx.commit(SessionChange::SolutionWritten {
            body: reply,
            revision_basis,
        })?;
        cx.emit(UiEvent::SolutionUpdated { revision_basis });
        if first {
            cx.set_phase(Phase::SolutionReady)?;
        }
        Ok(())
    }
}

/// The current solution, if one has been written.
pub fn load_solution(s: &SessionState) -> Option<&AnnotatedSolution> {
    s.solution.as_ref()
}
