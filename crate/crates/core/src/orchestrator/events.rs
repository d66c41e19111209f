use serde::{Deserialize, Serialize};

use super::state::{Phase, SessionChange};
use crate::agents::Speaker;
use crate::needs_memo::NeedId;
use crate::protocol::GroupQuestion;

/// Notifications for the UI, in causal order per session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UiEvent {
    AgentMessage { speaker: Speaker, text: String },
    QuestionsPosted { topic: String, questions: Vec<GroupQuestion> },
    NeedsUpdated { revision: u64 },
    SolutionUpdated { revision_basis: u64 },
    PhaseChanged { phase: Phase },
    SolutionReadyNotice,
    /// The drafted solution still cites ids that are not wanted needs.
    GroundingFailure { dangling: Vec<NeedId> },
    /// An agent turn failed; the phase is left as it was so the step can be retried.
    TurnFailed { code: String, message: String },
}

impl UiEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            UiEvent::AgentMessage { .. } => "agent_message",
            UiEvent::QuestionsPosted { .. } => "questions_posted",
            UiEvent::NeedsUpdated { .. } => "needs_updated",
            UiEvent::SolutionUpdated { .. } => "solution_updated",
            UiEvent::PhaseChanged { .. } => "phase_changed",
            UiEvent::SolutionReadyNotice => "solution_ready_notice",
            UiEvent::GroundingFailure { .. } => "grounding_failure",
            UiEvent::TurnFailed { .. } => "turn_failed",
        }
    }
}

/// Receives every committed change and emitted event, in order.
pub trait SessionObserver: Send + Sync {
    fn on_change(&self, _session_id: &str, _change: &SessionChange) {}
    fn on_event(&self, _session_id: &str, _event: &UiEvent) {}
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoopObserver;

impl SessionObserver for NoopObserver {}
