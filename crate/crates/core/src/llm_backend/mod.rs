//! Chat-completion backends: a live OpenAI-compatible client, a scripted
//! replay backend, a recording wrapper, and a seeded rule-based simulator.

mod digest;
mod live;
mod scripted;
pub mod simulated;
mod types;

pub use digest::request_digest;
pub use live::{decode_response, encode_request, LiveBackend, LiveConfig};
pub use scripted::{parse_fixtures, read_fixtures, write_fixtures, Fixture, RecordingBackend, ScriptedBackend};
pub use simulated::{SimulatedBackend, SimulationConfig};
pub use types::{
    BackendError, CallKey, ChatBackend, ChatMessage, ChatRequest, ChatResponse, MessageRole, Reply,
    ToolCall, ToolSchema, Usage,
};
