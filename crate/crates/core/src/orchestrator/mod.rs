//! Session state machine: phases, the change log, UI events and the engine
//! that runs agent turns between user interactions.

mod batching;
mod engine;
mod events;
mod host;
mod panels;
mod scenario;
mod state;

pub use batching::{count_numbered_items, next_batch, next_batch_size, NextBatch, MAX_BATCH};
pub use engine::{load_solution, EngineSettings, Orchestrator, SessionError, UserInput, BASELINE_ROLE};
pub use events::{NoopObserver, SessionObserver, UiEvent};
pub use panels::{ChatLine, ChatView, NeedRow, NeedsView, PanelSnapshot, SolutionView};
pub use scenario::{numbered_answers, Expectation, Scenario, ScenarioRun, Step};
pub use state::{
    milestone_key, Applied, ApplyError, Milestone, Phase, PostedBatch, SessionChange, SessionMode,
    SessionState,
};
