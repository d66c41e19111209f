use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::AgentRole;
use crate::llm_backend::{ToolCall, ToolSchema};
use crate::needs_memo::NeedId;

/// Every function an agent may be offered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    AddNeedSlot,
    FillNeedSlot,
    GetAllNeeds,
    GetClarifyNeeds,
    GetUserWantNeeds,
    WriteSolution,
    LoadSolution,
}

impl ToolName {
    pub const ALL: [ToolName; 7] = [
        ToolName::AddNeedSlot,
        ToolName::FillNeedSlot,
        ToolName::GetAllNeeds,
        ToolName::GetClarifyNeeds,
        ToolName::GetUserWantNeeds,
        ToolName::WriteSolution,
        ToolName::LoadSolution,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            ToolName::AddNeedSlot => "add_need_slot",
            ToolName::FillNeedSlot => "fill_need_slot",
            ToolName::GetAllNeeds => "get_all_needs",
            ToolName::GetClarifyNeeds => "get_clarify_needs",
            ToolName::GetUserWantNeeds => "get_user_want_needs",
            ToolName::WriteSolution => "write_solution",
            ToolName::LoadSolution => "load_solution",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }

    /// True for tools that change the memo or the solution.
    pub const fn mutates(self) -> bool {
        matches!(
            self,
            ToolName::AddNeedSlot | ToolName::FillNeedSlot | ToolName::WriteSolution
        )
    }

    pub fn schema(self) -> ToolSchema {
        let (description, parameters) = match self {
            ToolName::AddNeedSlot => (
                "Add a Need Slot to the User Needs Memo. Explicit needs use clarify=false and user_want=true; implicit or latent needs are phrased as a question with clarify=true and user_want=null.",
                json!({
                    "type": "object",
                    "properties": {
                        "need": {"type": "string", "description": "The need description, or the clarification question."},
                        "clarify": {"type": "boolean", "description": "Whether the user must be asked about this need."},
                        "user_want": {"type": ["boolean", "null"], "description": "true for explicit needs, null for needs that require clarification."}
                    },
                    "required": ["need", "clarify", "user_want"]
                }),
            ),
            ToolName::FillNeedSlot => (
                "Record the user's answer to a clarification question.",
                json!({
                    "type": "object",
                    "properties": {
                        "need_id": {"type": "string", "description": "The unique_id of the Need Slot, e.g. \"003\"."},
                        "need": {"type": "string", "description": "A detailed description of the user's need based on their answer."},
                        "user_want": {"type": "boolean", "description": "true if the user wants this need, false if they do not want to answer."}
                    },
                    "required": ["need_id", "need", "user_want"]
                }),
            ),
            ToolName::GetAllNeeds => (
                "Return all recorded user needs, split into wanted, not wanted and not yet answered.",
                json!({"type": "object", "properties": {}}),
            ),
            ToolName::GetClarifyNeeds => (
                "Return every Need Slot that still requires clarification.",
                json!({"type": "object", "properties": {}}),
            ),
            ToolName::GetUserWantNeeds => (
                "Return every Need Slot the user wants.",
                json!({"type": "object", "properties": {}}),
            ),
            ToolName::WriteSolution => (
                "Save the solution, replacing any previous one. Cite needs as (Need ID: 001).",
                json!({
                    "type": "object",
                    "properties": {
                        "solution": {"type": "string", "description": "The full solution in markdown."}
                    },
                    "required": ["solution"]
                }),
            ),
            ToolName::LoadSolution => (
                "Return the current solution. May be empty if no solution has been written yet.",
                json!({"type": "object", "properties": {}}),
            ),
        };
        ToolSchema {
            name: self.as_str().to_string(),
            description: description.to_string(),
            parameters,
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The fixed allow-list for each role.
pub const fn allowed_tools(role: AgentRole) -> &'static [ToolName] {
    match role {
        AgentRole::Inquiry => &[ToolName::FillNeedSlot],
        AgentRole::Milestone => &[ToolName::GetAllNeeds, ToolName::LoadSolution],
        AgentRole::NeedsDiscovery => &[ToolName::AddNeedSlot, ToolName::GetAllNeeds],
        AgentRole::Ranking => &[ToolName::GetClarifyNeeds],
        AgentRole::SolutionCraft => &[ToolName::GetUserWantNeeds, ToolName::WriteSolution],
    }
}

/// A tool call whose arguments passed type checking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolInvocation {
    AddNeedSlot {
        need: String,
        clarify: bool,
        user_want: Option<bool>,
    },
    FillNeedSlot {
        need_id: NeedId,
        need: String,
        user_want: bool,
    },
    GetAllNeeds,
    GetClarifyNeeds,
    GetUserWantNeeds,
    WriteSolution {
        solution: String,
    },
    LoadSolution,
}

impl ToolInvocation {
    pub fn name(&self) -> ToolName {
        match self {
            ToolInvocation::AddNeedSlot { .. } => ToolName::AddNeedSlot,
            ToolInvocation::FillNeedSlot { .. } => ToolName::FillNeedSlot,
            ToolInvocation::GetAllNeeds => ToolName::GetAllNeeds,
            ToolInvocation::GetClarifyNeeds => ToolName::GetClarifyNeeds,
            ToolInvocation::GetUserWantNeeds => ToolName::GetUserWantNeeds,
            ToolInvocation::WriteSolution { .. } => ToolName::WriteSolution,
            ToolInvocation::LoadSolution => ToolName::LoadSolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum PolicyReason {
    UnknownTool,
    NotAllowed,
    BadArguments(String),
}

/// Why a tool call was refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyViolation {
    pub role: AgentRole,
    pub tool: String,
    pub reason: PolicyReason,
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.reason {
            PolicyReason::UnknownTool => {
                write!(f, "{} called unknown function `{}`", self.role.agent_name(), self.tool)
            }
            PolicyReason::NotAllowed => write!(
                f,
                "{} is not allowed to call `{}`",
                self.role.agent_name(),
                self.tool
            ),
            PolicyReason::BadArguments(why) => {
                write!(f, "bad arguments for `{}`: {why}", self.tool)
            }
        }
    }
}

fn object_args(args: &Value) -> Result<Map<String, Value>, String> {
    match args {
        Value::Object(map) => Ok(map.clone()),
        Value::Null => Ok(Map::new()),
        Value::String(s) if s.trim().is_empty() => Ok(Map::new()),
        other => Err(format!("arguments must be a JSON object, got {other}")),
    }
}

fn string_field(args: &Map<String, Value>, name: &str) -> Result<String, String> {
    match args.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(format!("`{name}` must be a string, got {other}")),
        None => Err(format!("missing `{name}`")),
    }
}

fn bool_field(args: &Map<String, Value>, names: &[&str]) -> Result<Option<bool>, String> {
    for name in names {
        match args.get(*name) {
            Some(Value::Bool(b)) => return Ok(Some(*b)),
            Some(Value::Null) => return Ok(None),
            Some(other) => return Err(format!("`{name}` must be a boolean, got {other}")),
            None => {}
        }
    }
    Ok(None)
}

fn need_id_field(args: &Map<String, Value>) -> Result<NeedId, String> {
    let raw = match args.get("need_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => return Err(format!("`need_id` must be an id string, got {other}")),
        None => return Err("missing `need_id`".into()),
    };
    raw.parse().map_err(|_| format!("`need_id` {raw:?} is not a need id"))
}

fn typecheck(tool: ToolName, args: &Value) -> Result<ToolInvocation, String> {
    let args = object_args(args)?;
    Ok(match tool {
        ToolName::AddNeedSlot => ToolInvocation::AddNeedSlot {
            need: string_field(&args, "need")?,
            clarify: bool_field(&args, &["clarify", "Clarify"])?
                .ok_or("missing `clarify`")?,
            user_want: bool_field(&args, &["user_want"])?,
        },
        ToolName::FillNeedSlot => ToolInvocation::FillNeedSlot {
            need_id: need_id_field(&args)?,
            need: string_field(&args, "need")?,
            user_want: bool_field(&args, &["user_want"])?
                .ok_or("`user_want` must be true or false")?,
        },
        ToolName::WriteSolution => ToolInvocation::WriteSolution {
            solution: string_field(&args, "solution")?,
        },
        ToolName::GetAllNeeds => ToolInvocation::GetAllNeeds,
        ToolName::GetClarifyNeeds => ToolInvocation::GetClarifyNeeds,
        ToolName::GetUserWantNeeds => ToolInvocation::GetUserWantNeeds,
        ToolName::LoadSolution => ToolInvocation::LoadSolution,
    })
}

/// Accepts a call only if the role may use the tool and the arguments
/// typecheck. Never panics.
pub fn enforce_tool_policy(role: AgentRole, call: &ToolCall) -> Result<ToolInvocation, PolicyViolation> {
    let violation = |reason| PolicyViolation {
        role,
        tool: call.name.clone(),
        reason,
    };
    let tool = ToolName::parse(&call.name).ok_or_else(|| violation(PolicyReason::UnknownTool))?;
    if !allowed_tools(role).contains(&tool) {
        return Err(violation(PolicyReason::NotAllowed));
    }
    typecheck(tool, &call.args).map_err(|why| violation(PolicyReason::BadArguments(why)))
}
