//! The five agent roles, their prompts and tool allow-lists, and the turn
//! loop that drives one role against a chat backend.

mod context;
pub mod directive;
mod prompts;
mod tools;
mod turn;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::ControlToken;

pub use context::{assemble_context, Speaker, TranscriptEntry, DIRECTIVE_HEADER};
pub use prompts::{PromptPack, PromptPackError, BASELINE_FILE, TEAM_INTRO_FILE};
pub use tools::{
    allowed_tools, enforce_tool_policy, PolicyReason, PolicyViolation, ToolInvocation, ToolName,
};
pub use turn::{
    run_agent_turn, AgentError, AgentTurnResult, ExecutedCall, ToolOutcome, TurnDraft, TurnHost,
    TurnOptions, Violation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Inquiry,
    Milestone,
    NeedsDiscovery,
    Ranking,
    SolutionCraft,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Inquiry,
        AgentRole::Milestone,
        AgentRole::NeedsDiscovery,
        AgentRole::Ranking,
        AgentRole::SolutionCraft,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            AgentRole::Inquiry => "inquiry",
            AgentRole::Milestone => "milestone",
            AgentRole::NeedsDiscovery => "needs_discovery",
            AgentRole::Ranking => "ranking",
            AgentRole::SolutionCraft => "solution_craft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    /// Name the prompts use for the role.
    pub const fn agent_name(self) -> &'static str {
        match self {
            AgentRole::Inquiry => "Inquiry-Agent",
            AgentRole::Milestone => "Milestone-Agent",
            AgentRole::NeedsDiscovery => "NeedsDiscovery-Agent",
            AgentRole::Ranking => "Ranking-Agent",
            AgentRole::SolutionCraft => "SolutionCraft-Agent",
        }
    }

    pub const fn prompt_file(self) -> &'static str {
        match self {
            AgentRole::Inquiry => "inquiry.md",
            AgentRole::Milestone => "milestone.md",
            AgentRole::NeedsDiscovery => "needs_discovery.md",
            AgentRole::Ranking => "ranking.md",
            AgentRole::SolutionCraft => "solution_craft.md",
        }
    }

    /// Tokens that may end a turn of this role.
    pub const fn terminal_tokens(self) -> &'static [ControlToken] {
        match self {
            AgentRole::Inquiry => &[ControlToken::Inquiry, ControlToken::BeginMilestone],
            AgentRole::Milestone => &[ControlToken::MilestoneEnd, ControlToken::BeginPlan],
            AgentRole::NeedsDiscovery => &[ControlToken::DiscoverEnd],
            AgentRole::Ranking => &[],
            AgentRole::SolutionCraft => &[ControlToken::SolutionEnd],
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_MAX_TOOL_ROUNDS: u32 = 8;
pub const DEFAULT_MAX_RETRIES: u32 = 2;

/// Immutable description of one role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub role: AgentRole,
    pub system_prompt: String,
    pub allowed_tools: Vec<ToolName>,
    pub terminal_tokens: Vec<ControlToken>,
    pub max_tool_rounds: u32,
    pub max_retries: u32,
}

impl AgentSpec {
    pub fn new(role: AgentRole, pack: &PromptPack) -> Self {
        Self {
            role,
            system_prompt: pack.system_prompt(role),
            allowed_tools: allowed_tools(role).to_vec(),
            terminal_tokens: role.terminal_tokens().to_vec(),
            max_tool_rounds: DEFAULT_MAX_TOOL_ROUNDS,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    /// First prompt line containing any of `needles`, tried in order.
    pub fn rule_line(&self, needles: &[&str]) -> Option<&str> {
        needles.iter().find_map(|needle| {
            self.system_prompt
                .lines()
                .find(|line| line.contains(needle))
                .map(str::trim)
        })
    }
}

/// One spec per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRoster {
    specs: Vec<AgentSpec>,
}

impl AgentRoster {
    pub fn new(pack: &PromptPack) -> Self {
        Self {
            specs: AgentRole::ALL.iter().map(|&r| AgentSpec::new(r, pack)).collect(),
        }
    }

    pub fn with_limits(mut self, max_tool_rounds: u32, max_retries: u32) -> Self {
        for spec in &mut self.specs {
            spec.max_tool_rounds = max_tool_rounds;
            spec.max_retries = max_retries;
        }
        self
    }

    pub fn spec(&self, role: AgentRole) -> &AgentSpec {
        &self.specs[AgentRole::ALL.iter().position(|&r| r == role).expect("every role has a spec")]
    }
}

impl Default for AgentRoster {
    fn default() -> Self {
        Self::new(&PromptPack::builtin())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_roles_with_distinct_names() {
        let names: std::collections::BTreeSet<&str> =
            AgentRole::ALL.iter().map(|r| r.as_str()).collect();
        assert_eq!(names.len(), 5);
        for role in AgentRole::ALL {
            assert_eq!(AgentRole::parse(role.as_str()), Some(role));
        }
    }

    #[test]
    fn rule_lines_are_quoted_from_prompt() {
        let roster = AgentRoster::default();
        let line = roster
            .spec(AgentRole::Inquiry)
            .rule_line(&["You can only call functions"])
            .unwrap();
        assert!(line.contains("`[fill_need_slot]`"));
        assert!(roster.spec(AgentRole::Ranking).rule_line(&["no such text"]).is_none());
    }
}
