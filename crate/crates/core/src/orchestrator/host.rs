use std::collections::BTreeSet;

use serde_json::{json, Value};

use super::batching::{count_numbered_items, MAX_BATCH};
use super::events::{SessionObserver, UiEvent};
use super::state::{milestone_key, Applied, ApplyError, Phase, SessionChange, SessionState};
use crate::agents::{AgentRole, ToolInvocation, ToolOutcome, TurnDraft, TurnHost, Violation};
use crate::llm_backend::CallKey;
use crate::needs_memo::{slots_to_canonical, NeedOrigin, WantStatus};
use crate::protocol::{
    parse_ranking_output, validate_solution_refs, AnnotatedSolution, ControlToken, RankingError,
    RankingOutcome,
};

/// Mutable session access for one operation: every change goes through
/// [`Ctx::commit`] and every event through [`Ctx::emit`].
pub(crate) struct Ctx<'a> {
    pub s: &'a mut SessionState,
    pub observer: &'a dyn SessionObserver,
    pub events: Vec<UiEvent>,
}

impl<'a> Ctx<'a> {
    pub fn new(s: &'a mut SessionState, observer: &'a dyn SessionObserver) -> Self {
        Self {
            s,
            observer,
            events: Vec::new(),
        }
    }

    pub fn commit(&mut self, change: SessionChange) -> Result<Applied, ApplyError> {
        let applied = self.s.apply(&change)?;
        self.observer.on_change(&self.s.id, &change);
        Ok(applied)
    }

    pub fn emit(&mut self, event: UiEvent) {
        self.observer.on_event(&self.s.id, &event);
        self.events.push(event);
    }

    pub fn set_phase(&mut self, phase: Phase) -> Result<(), ApplyError> {
        self.commit(SessionChange::PhaseChanged { phase })?;
        self.emit(UiEvent::PhaseChanged { phase });
        Ok(())
    }

    /// Commits a memo mutation and announces the new revision.
    pub fn commit_memo(&mut self, change: SessionChange) -> Result<Applied, ApplyError> {
        let applied = self.commit(change)?;
        let revision = self.s.memo.revision();
        self.emit(UiEvent::NeedsUpdated { revision });
        Ok(applied)
    }

    pub fn next_call_key(&mut self, role: &str) -> CallKey {
        let key = CallKey::new(self.s.tag.clone(), role, self.s.calls_issued(role));
        self.commit(SessionChange::CallIssued { role: role.into() })
            .expect("call counters always apply");
        key
    }
}

/// Which turn-specific checks apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Check {
    Milestone { plan_only: bool },
    Discovery,
    Ranking,
    Inquiry,
    Drafting,
}

/// Parsed "Next milestone:" block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MilestoneDraft {
    pub text: String,
    pub explanation: String,
}

fn strip_markup(line: &str) -> String {
    line.replace("**", "")
        .trim()
        .trim_start_matches(['-', '*', '#', '>', ' '])
        .trim()
        .to_string()
}

fn after_label(line: &str, label: &str) -> Option<String> {
    let clean = strip_markup(line);
    let head = clean.get(..label.len())?;
    head.eq_ignore_ascii_case(label)
        .then(|| clean[label.len()..].trim().to_string())
}

/// Recovers the milestone from a MilestoneEnd message. Without a
/// "Next milestone:" line the whole body is the milestone.
pub(crate) fn parse_milestone(body: &str) -> MilestoneDraft {
    let text = body
        .lines()
        .find_map(|l| after_label(l, "Next milestone:"))
        .filter(|t| !t.is_empty());
    let explanation = body
        .lines()
        .find_map(|l| after_label(l, "Explanation:"))
        .unwrap_or_default();
    MilestoneDraft {
        text: text.unwrap_or_else(|| body.trim().to_string()),
        explanation,
    }
}

pub(crate) struct EngineHost<'c, 'a> {
    pub cx: &'c mut Ctx<'a>,
    pub check: Check,
    pub milestone: Option<MilestoneDraft>,
    pub ranking: Option<RankingOutcome>,
    pub staged_solution: Option<String>,
    pub failure: Option<ApplyError>,
}

impl<'c, 'a> EngineHost<'c, 'a> {
    pub fn new(cx: &'c mut Ctx<'a>, check: Check) -> Self {
        Self {
            cx,
            check,
            milestone: None,
            ranking: None,
            staged_solution: None,
            failure: None,
        }
    }

    fn ok(value: Value) -> ToolOutcome {
        ToolOutcome {
            content: value.to_string(),
            ok: true,
        }
    }

    fn err(code: &str, message: impl std::fmt::Display) -> ToolOutcome {
        ToolOutcome {
            content: json!({"status": "error", "code": code, "message": message.to_string()}).to_string(),
            ok: false,
        }
    }

    fn memo_result(&mut self, change: SessionChange) -> ToolOutcome {
        match self.cx.commit_memo(change) {
            Ok(Applied::NeedCreated(id)) | Ok(Applied::NeedChanged(id)) => Self::ok(json!({
                "status": "ok",
                "need_id": id.to_string(),
                "revision": self.cx.s.memo.revision(),
            })),
            Ok(_) => Self::ok(json!({"status": "ok"})),
            Err(ApplyError::Memo(e)) => Self::err(e.code(), e),
            Err(e) => {
                let outcome = Self::err("Internal", &e);
                self.failure = Some(e);
                outcome
            }
        }
    }

    fn run_tool(&mut self, invocation: &ToolInvocation) -> ToolOutcome {
        let memo = &self.cx.s.memo;
        match invocation {
            ToolInvocation::AddNeedSlot {
                need,
                clarify,
                user_want,
            } => {
                let want = WantStatus::from_wire(*user_want);
                let origin = if *clarify || want != WantStatus::Wanted {
                    NeedOrigin::AgentInferred
                } else {
                    NeedOrigin::UserExplicit
                };
                self.memo_result(SessionChange::NeedAdded {
                    need: need.clone(),
                    clarify: *clarify,
                    want,
                    origin,
                })
            }
            ToolInvocation::FillNeedSlot {
                need_id,
                need,
                user_want,
            } => self.memo_result(SessionChange::NeedFilled {
                id: *need_id,
                need: need.clone(),
                want: if *user_want {
                    WantStatus::Wanted
                } else {
                    WantStatus::Declined
                },
            }),
            ToolInvocation::GetAllNeeds => {
                let all = memo.get_all_needs();
                Self::ok(json!({
                    "User Wants Needs": slots_to_canonical(&all.wanted),
                    "User do not want to answer needs": slots_to_canonical(&all.declined),
                    "User Not Answered Needs": slots_to_canonical(&all.unanswered),
                }))
            }
            ToolInvocation::GetClarifyNeeds => Self::ok(slots_to_canonical(&memo.get_clarify_needs())),
            ToolInvocation::GetUserWantNeeds => Self::ok(slots_to_canonical(&memo.get_user_want_needs())),
            ToolInvocation::LoadSolution => Self::ok(json!({
                "solution": self.cx.s.solution.as_ref().map(|s| s.body.clone()),
            })),
            ToolInvocation::WriteSolution { solution } => {
                if self.cx.s.phase != Phase::SolutionDrafting {
                    return Self::err(
                        "WriteOutsideDrafting",
                        format!("solutions can only be written while drafting, not during {}", self.cx.s.phase),
                    );
                }
                let cited: BTreeSet<String> = AnnotatedSolution::new(solution.clone(), 0)
                    .cited_ids()
                    .iter()
                    .map(ToString::to_string)
                    .collect();
                self.staged_solution = Some(solution.clone());
                Self::ok(json!({"status": "ok", "cited_need_ids": cited}))
            }
        }
    }
}

impl TurnHost for EngineHost<'_, '_> {
    fn next_call_key(&mut self, role: AgentRole) -> CallKey {
        self.cx.next_call_key(role.as_str())
    }

    fn execute(&mut self, role: AgentRole, invocation: &ToolInvocation) -> ToolOutcome {
        let outcome = self.run_tool(invocation);
        self.cx
            .commit(SessionChange::ToolExecuted {
                role,
                tool: invocation.name(),
            })
            .expect("tool audit always applies");
        outcome
    }

    fn begin_attempt(&mut self, _role: AgentRole, _attempt: u32) {
        self.milestone = None;
        self.ranking = None;
        if self.check == Check::Drafting {
            self.staged_solution = None;
        }
    }

    fn validate(&mut self, _role: AgentRole, draft: &TurnDraft<'_>) -> Result<(), Violation> {
        let s = &*self.cx.s;
        match self.check {
            Check::Milestone { plan_only } => {
                if draft.parsed.contains(ControlToken::MilestoneEnd) {
                    let parsed = parse_milestone(&draft.parsed.body);
                    let key = milestone_key(&parsed.text);
                    if s.milestones.iter().any(|m| milestone_key(&m.text) == key) {
                        return Err(Violation::DuplicateMilestone { text: parsed.text });
                    }
                    self.milestone = Some(parsed);
                } else if !plan_only && s.memo.get_user_want_needs().is_empty() {
                    return Err(Violation::PlanWithoutNeeds);
                }
                Ok(())
            }
            Check::Discovery => Ok(()),
            Check::Ranking => match parse_ranking_output(draft.raw, &s.memo) {
                Ok(outcome) => {
                    self.ranking = Some(outcome);
                    Ok(())
                }
                Err(e) => Err(Violation::BadRanking {
                    reason: match e {
                        RankingError::MalformedJson(m) => format!("malformed JSON ({m})"),
                        RankingError::EmptyRanking { .. } => {
                            "no entry names a need_id that currently requires clarification".into()
                        }
                    },
                }),
            },
            Check::Inquiry => {
                let count = count_numbered_items(&draft.parsed.body);
                if draft.parsed.contains(ControlToken::Inquiry) && count > MAX_BATCH {
                    return Err(Violation::BatchTooLarge {
                        count,
                        limit: MAX_BATCH,
                    });
                }
                Ok(())
            }
            Check::Drafting => {
                let Some(body) = &self.staged_solution else {
                    return Err(Violation::NoSolutionWritten);
                };
                let report = validate_solution_refs(&AnnotatedSolution::new(body.clone(), 0), &s.memo);
                if report.is_grounded() {
                    Ok(())
                } else {
                    Err(Violation::UngroundedSolution {
                        dangling: report.dangling,
                    })
                }
            }
        }
    }
}
