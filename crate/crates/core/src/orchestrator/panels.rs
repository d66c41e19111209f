use serde::{Deserialize, Serialize};

use super::state::{Phase, PostedBatch, SessionMode, SessionState};
use crate::agents::Speaker;
use crate::needs_memo::{NeedId, NeedOrigin, WantStatus};
use crate::protocol::NeedRef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatLine {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatView {
    pub messages: Vec<ChatLine>,
    /// Questions awaiting the user's answers.
    pub pending_questions: Option<PostedBatch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionView {
    pub body: String,
    /// Citation spans, byte offsets into `body`.
    pub refs: Vec<NeedRef>,
    pub revision_basis: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedRow {
    pub id: NeedId,
    pub need: String,
    pub clarify: bool,
    pub user_want: Option<bool>,
    pub origin: NeedOrigin,
    pub status: WantStatus,
    /// False for clarification questions not yet put to the user.
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedsView {
    pub revision: u64,
    pub slots: Vec<NeedRow>,
}

/// The three panels, all read from one session state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSnapshot {
    pub session_id: String,
    pub mode: SessionMode,
    pub phase: Phase,
    pub chat: ChatView,
    pub solution: Option<SolutionView>,
    pub needs: NeedsView,
}

impl PanelSnapshot {
    pub fn capture(state: &SessionState) -> Self {
        Self {
            session_id: state.id.clone(),
            mode: state.mode,
            phase: state.phase,
            chat: ChatView {
                messages: state
                    .transcript
                    .iter()
                    .filter(|e| e.visible)
                    .map(|e| ChatLine {
                        speaker: e.speaker,
                        text: e.text.clone(),
                    })
                    .collect(),
                pending_questions: state.posted.clone(),
            },
            solution: state.solution.as_ref().map(|s| SolutionView {
                body: s.body.clone(),
                refs: s.refs.clone(),
                revision_basis: s.revision_basis,
            }),
            needs: NeedsView {
                revision: state.memo.revision(),
                slots: state
                    .memo
                    .slots()
                    .map(|s| NeedRow {
                        id: s.id,
                        need: s.need.clone(),
                        clarify: s.clarify,
                        user_want: s.want.to_wire(),
                        origin: s.origin,
                        status: s.want,
                        visible: !s.clarify || state.asked.contains(&s.id),
                    })
                    .collect(),
            },
        }
    }

    /// Canonical bytes used for equality checks across restarts.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}
