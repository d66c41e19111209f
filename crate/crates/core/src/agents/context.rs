use serde::{Deserialize, Serialize};

use super::{AgentRole, AgentSpec};
use crate::llm_backend::ChatMessage;
use crate::protocol::ControlToken;

/// Who wrote a transcript entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent(AgentRole),
    /// The single assistant of a baseline session.
    Assistant,
}

/// One message in the shared session transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    /// Message text with control tokens removed.
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<ControlToken>,
    /// Shown in the chat panel. Hand-offs between agents are not.
    pub visible: bool,
}

impl TranscriptEntry {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            tokens: Vec::new(),
            visible: true,
        }
    }

    pub fn agent(role: AgentRole, text: impl Into<String>, tokens: Vec<ControlToken>, visible: bool) -> Self {
        Self {
            speaker: Speaker::Agent(role),
            text: text.into(),
            tokens,
            visible,
        }
    }

    /// Text as the author originally produced it, tokens appended.
    pub fn with_tokens(&self) -> String {
        let mut out = self.text.clone();
        for token in &self.tokens {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(token.surface());
        }
        out
    }
}

pub const DIRECTIVE_HEADER: &str = "[System]";

/// Builds the message list for one agent turn.
///
/// The system prompt comes first, then the shared transcript. The role's own
/// entries become assistant messages; everything else is a user message
/// labelled with its author. The directive, if any, is appended last.
pub fn assemble_context(
    spec: &AgentSpec,
    transcript: &[TranscriptEntry],
    directive: Option<&str>,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(transcript.len() + 2);
    messages.push(ChatMessage::system(spec.system_prompt.clone()));
    for entry in transcript {
        match entry.speaker {
            Speaker::Agent(role) if role == spec.role => {
                messages.push(ChatMessage::assistant(entry.with_tokens()));
            }
            Speaker::Agent(role) => messages.push(ChatMessage::user(format!(
                "[{}]\n{}",
                role.agent_name(),
                entry.with_tokens()
            ))),
            Speaker::User => messages.push(ChatMessage::user(format!("User: {}", entry.text))),
            Speaker::Assistant => messages.push(ChatMessage::assistant(entry.text.clone())),
        }
    }
    if let Some(directive) = directive {
        messages.push(ChatMessage::user(format!("{DIRECTIVE_HEADER}\n{directive}")));
    }
    messages
}
