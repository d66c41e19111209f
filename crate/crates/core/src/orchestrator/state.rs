use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRole, ToolName, TranscriptEntry};
use crate::needs_memo::{EditReceipt, MemoError, NeedId, NeedOrigin, NeedsMemo, UserEdit, WantStatus};
use crate::protocol::{AnnotatedSolution, GroupQuestion, QuestionGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Care,
    Baseline,
}

impl SessionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionMode::Care => "care",
            SessionMode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Phase {
    AwaitUserQuery,
    MilestoneDecision,
    NeedsDiscovery,
    Ranking,
    /// Cursors count groups and batches posted in the current ranking round.
    Inquiring { group: u32, batch: u32 },
    SolutionDrafting,
    SolutionReady,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::AwaitUserQuery => "await_user_query",
            Phase::MilestoneDecision => "milestone_decision",
            Phase::NeedsDiscovery => "needs_discovery",
            Phase::Ranking => "ranking",
            Phase::Inquiring { .. } => "inquiring",
            Phase::SolutionDrafting => "solution_drafting",
            Phase::SolutionReady => "solution_ready",
        }
    }

    /// Phases that wait for the user rather than run an agent.
    pub fn awaits_user(self) -> bool {
        matches!(
            self,
            Phase::AwaitUserQuery | Phase::Inquiring { .. } | Phase::SolutionReady
        )
    }

    /// The declared transition graph.
    pub fn can_transition_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (AwaitUserQuery, MilestoneDecision)
                | (AwaitUserQuery, SolutionReady)
                | (MilestoneDecision, NeedsDiscovery)
                | (MilestoneDecision, SolutionDrafting)
                | (NeedsDiscovery, Ranking)
                | (NeedsDiscovery, MilestoneDecision)
                | (Ranking, Inquiring { .. })
                | (Inquiring { .. }, Inquiring { .. })
                | (Inquiring { .. }, MilestoneDecision)
                | (SolutionDrafting, SolutionReady)
                | (SolutionReady, MilestoneDecision)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Inquiring { group, batch } => write!(f, "inquiring({group}, {batch})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestone {
    pub text: String,
    pub explanation: String,
    pub seq: u32,
}

/// Normalized milestone text used for the uniqueness check.
pub fn milestone_key(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_string()
}

/// The batch of questions currently in front of the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostedBatch {
    pub topic: String,
    pub questions: Vec<GroupQuestion>,
}

/// One entry of the session's append-only change log. Applying the log to
/// an empty session reproduces the session exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionChange {
    Transcript {
        entry: TranscriptEntry,
    },
    NeedAdded {
        need: String,
        clarify: bool,
        want: WantStatus,
        origin: NeedOrigin,
    },
    NeedFilled {
        id: NeedId,
        need: String,
        want: WantStatus,
    },
    UserEdited {
        edit: UserEdit,
    },
    PhaseChanged {
        phase: Phase,
    },
    MilestoneAdded {
        milestone: Milestone,
    },
    GroupsQueued {
        groups: Vec<QuestionGroup>,
    },
    BatchPosted {
        batch: PostedBatch,
    },
    GroupsCleared,
    SolutionWritten {
        body: String,
        revision_basis: u64,
    },
    Flags {
        plan_requested: bool,
        replan_pending: bool,
    },
    CallIssued {
        role: String,
    },
    ToolExecuted {
        role: AgentRole,
        tool: ToolName,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error(transparent)]
    Memo(#[from] MemoError),
    #[error("illegal phase transition {from} -> {to}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("milestone \"{0}\" already exists")]
    DuplicateMilestone(String),
}

/// What a successfully applied change produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Nothing,
    NeedCreated(NeedId),
    NeedChanged(NeedId),
    Edited(EditReceipt),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    /// Fixture key namespace for backend calls.
    pub tag: String,
    pub mode: SessionMode,
    pub phase: Phase,
    pub memo: NeedsMemo,
    pub milestones: Vec<Milestone>,
    pub pending_groups: Vec<QuestionGroup>,
    pub posted: Option<PostedBatch>,
    /// Clarification slots that have been put to the user.
    pub asked: BTreeSet<NeedId>,
    pub solution: Option<AnnotatedSolution>,
    pub transcript: Vec<TranscriptEntry>,
    pub plan_requested: bool,
    pub replan_pending: bool,
    pub drafting_runs: u32,
    pub tool_executions: Vec<(AgentRole, ToolName)>,
    pub call_counters: BTreeMap<String, u32>,
    pub changes_applied: u64,
}

impl SessionState {
    pub fn new(id: impl Into<String>, tag: impl Into<String>, mode: SessionMode) -> Self {
        Self {
            id: id.into(),
            tag: tag.into(),
            mode,
            phase: Phase::AwaitUserQuery,
            memo: NeedsMemo::new(),
            milestones: Vec::new(),
            pending_groups: Vec::new(),
            posted: None,
            asked: BTreeSet::new(),
            solution: None,
            transcript: Vec::new(),
            plan_requested: false,
            replan_pending: false,
            drafting_runs: 0,
            tool_executions: Vec::new(),
            call_counters: BTreeMap::new(),
            changes_applied: 0,
        }
    }

    /// Rebuilds a session from its change log.
    pub fn replay<'a>(
        id: impl Into<String>,
        tag: impl Into<String>,
        mode: SessionMode,
        changes: impl IntoIterator<Item = &'a SessionChange>,
    ) -> Result<Self, ApplyError> {
        let mut state = Self::new(id, tag, mode);
        for change in changes {
            state.apply(change)?;
        }
        Ok(state)
    }

    pub fn calls_issued(&self, role: &str) -> u32 {
        self.call_counters.get(role).copied().unwrap_or(0)
    }

    /// Drops queued questions whose slot was clarified or deleted.
    fn prune(&mut self) {
        let memo = &self.memo;
        let live = |q: &GroupQuestion| memo.get(q.need_id).is_some_and(|s| s.clarify);
        for group in &mut self.pending_groups {
            group.questions.retain(live);
        }
        self.pending_groups.retain(|g| !g.questions.is_empty());
        if let Some(batch) = &mut self.posted {
            batch.questions.retain(live);
        }
    }

    /// The only mutation path. A failed change leaves the state untouched.
    pub fn apply(&mut self, change: &SessionChange) -> Result<Applied, ApplyError> {
        let applied = match change {
            SessionChange::Transcript { entry } => {
                self.transcript.push(entry.clone());
                Applied::Nothing
            }
            SessionChange::NeedAdded {
                need,
                clarify,
                want,
                origin,
            } => {
                let id = self.memo.add_need_slot(need, *clarify, *want, *origin)?;
                Applied::NeedCreated(id)
            }
            SessionChange::NeedFilled { id, need, want } => {
                self.memo.fill_need_slot(*id, need, *want)?;
                self.prune();
                Applied::NeedChanged(*id)
            }
            SessionChange::UserEdited { edit } => {
                let receipt = self.memo.apply_user_edit(edit)?;
                self.prune();
                Applied::Edited(receipt)
            }
            SessionChange::PhaseChanged { phase } => {
                if !self.phase.can_transition_to(*phase) {
                    return Err(ApplyError::IllegalTransition {
                        from: self.phase,
                        to: *phase,
                    });
                }
                if *phase == Phase::SolutionDrafting {
                    self.drafting_runs += 1;
                }
                self.phase = *phase;
                Applied::Nothing
            }
            SessionChange::MilestoneAdded { milestone } => {
                let key = milestone_key(&milestone.text);
                if self.milestones.iter().any(|m| milestone_key(&m.text) == key) {
                    return Err(ApplyError::DuplicateMilestone(milestone.text.clone()));
                }
                self.milestones.push(milestone.clone());
                Applied::Nothing
            }
            SessionChange::GroupsQueued { groups } => {
                self.pending_groups = groups.clone();
                self.prune();
                Applied::Nothing
            }
            SessionChange::BatchPosted { batch } => {
                self.asked.extend(batch.questions.iter().map(|q| q.need_id));
                self.posted = Some(batch.clone());
                self.prune();
                Applied::Nothing
            }
            SessionChange::GroupsCleared => {
                self.pending_groups.clear();
                self.posted = None;
                Applied::Nothing
            }
            SessionChange::SolutionWritten {
                body,
                revision_basis,
            } => {
                self.solution = Some(AnnotatedSolution::new(body.clone(), *revision_basis));
                Applied::Nothing
            }
            SessionChange::Flags {
                plan_requested,
                replan_pending,
            } => {
                self.plan_requested = *plan_requested;
                self.replan_pending = *replan_pending;
                Applied::Nothing
            }
            SessionChange::CallIssued { role } => {
                *self.call_counters.entry(role.clone()).or_insert(0) += 1;
                Applied::Nothing
            }
            SessionChange::ToolExecuted { role, tool } => {
                self.tool_executions.push((*role, *tool));
                Applied::Nothing
            }
        };
        self.changes_applied += 1;
        Ok(applied)
    }

    /// Structural invariants that must hold between operations.
    pub fn check_invariants(&self) -> Result<(), String> {
        let inquiring = matches!(self.phase, Phase::Inquiring { .. });
        if inquiring != !self.pending_groups.is_empty() {
            return Err(format!(
                "phase {} with {} pending groups",
                self.phase,
                self.pending_groups.len()
            ));
        }
        if self.mode == SessionMode::Care && self.solution.is_some() && self.drafting_runs == 0 {
            return Err("solution present without a drafting run".into());
        }
        let keys: BTreeSet<String> = self.milestones.iter().map(|m| milestone_key(&m.text)).collect();
        if keys.len() != self.milestones.len() {
            return Err("duplicate milestone".into());
        }
        for group in &self.pending_groups {
            for q in &group.questions {
                if !self.memo.get(q.need_id).is_some_and(|s| s.clarify) {
                    return Err(format!("pending question {} is not open", q.need_id));
                }
            }
        }
        if self.mode == SessionMode::Baseline
            && (!self.tool_executions.is_empty() || !self.milestones.is_empty() || !self.memo.is_empty())
        {
            return Err("baseline session touched the agent pipeline".into());
        }
        Ok(())
    }
}
