use serde::{Deserialize, Serialize};

use super::engine::{Orchestrator, SessionError, UserInput};
use super::events::UiEvent;
use super::panels::PanelSnapshot;
use super::state::{Phase, SessionMode, SessionState};
use crate::needs_memo::UserEdit;

/// One scripted user action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Input { input: UserInput },
    Edit { edit: UserEdit },
    /// Answers every posted question with "<n>. <answer>" lines.
    AnswerAll { answer: String },
}

/// A headless session: query plus the user's actions in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub tag: String,
    pub query: String,
    pub mode: SessionMode,
    #[serde(default)]
    pub steps: Vec<Step>,
}

/// What a replayed scenario must reproduce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub scenario: Scenario,
    pub events: Vec<UiEvent>,
    pub snapshot: PanelSnapshot,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub state: SessionState,
    pub events: Vec<UiEvent>,
}

/// Numbered answers for a batch of `n` questions.
pub fn numbered_answers(n: usize, answer: &str) -> String {
    (1..=n)
        .map(|i| format!("{i}. {answer}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Scenario {
    pub async fn run(&self, orch: &Orchestrator) -> Result<ScenarioRun, SessionError> {
        let (mut state, mut events) = orch
            .start_session(self.tag.clone(), self.tag.clone(), &self.query, self.mode)
            .await?;
        for step in &self.steps {
            match step {
                Step::Input { input } => events.extend(orch.handle_user_message(&mut state, input.clone()).await?),
                Step::Edit { edit } => events.extend(orch.apply_manual_edit(&mut state, edit).await?.1),
                Step::AnswerAll { answer } => {
                    if !matches!(state.phase, Phase::Inquiring { .. }) {
                        continue;
                    }
                    let n = state.posted.as_ref().map_or(0, |b| b.questions.len());
                    let text = numbered_answers(n.max(1), answer);
                    events.extend(orch.handle_user_message(&mut state, UserInput::message(text)).await?);
                }
            }
        }
        Ok(ScenarioRun { state, events })
    }
}
