use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::needs_memo::{NeedId, NeedsMemo};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupQuestion {
    pub need_id: NeedId,
    pub question: String,
}

/// A themed, ordered set of clarification questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub topic: String,
    pub questions: Vec<GroupQuestion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The entry is not a `{need_id, need}` object.
    Malformed,
    /// No live slot has that id.
    UnknownId,
    /// The slot no longer needs clarification.
    NotClarifying,
    /// The id was already used by an earlier question.
    Repeated,
}

/// A ranking entry that was discarded during validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedQuestion {
    pub topic: String,
    pub key: String,
    pub raw_need_id: Option<String>,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub groups: Vec<QuestionGroup>,
    pub dropped: Vec<DroppedQuestion>,
}

impl RankingOutcome {
    pub fn question_count(&self) -> usize {
        self.groups.iter().map(|g| g.questions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankingError {
    #[error("ranking output is not a JSON object: {0}")]
    MalformedJson(String),
    #[error("ranking output has no usable questions ({} dropped)", dropped.len())]
    EmptyRanking { dropped: Vec<DroppedQuestion> },
}

fn fence_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\r?\n(.*?)```").expect("valid pattern"))
}

/// Returns the first balanced `{...}` span, skipping braces inside strings.
fn first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Locates the JSON object in agent output, looking inside a code fence first.
pub fn extract_json_object(text: &str) -> Option<&str> {
    fence_pattern()
        .captures_iter(text)
        .filter_map(|c| c.get(1))
        .find_map(|m| first_object(m.as_str()))
        .or_else(|| first_object(text))
}

fn raw_id(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses the ranking role's grouped-question JSON and validates every
/// referenced need against the memo.
pub fn parse_ranking_output(text: &str, memo: &NeedsMemo) -> Result<RankingOutcome, RankingError> {
    let json = extract_json_object(text)
        .ok_or_else(|| RankingError::MalformedJson("no JSON object found".into()))?;
    let root: Value =
        serde_json::from_str(json).map_err(|e| RankingError::MalformedJson(e.to_string()))?;
    let Value::Object(topics) = root else {
        return Err(RankingError::MalformedJson("top level is not an object".into()));
    };

    let mut groups = Vec::new();
    let mut dropped = Vec::new();
    let mut seen: BTreeSet<NeedId> = BTreeSet::new();
    for (topic, entries) in topics {
        let Value::Object(entries) = entries else {
            dropped.push(DroppedQuestion {
                topic: topic.clone(),
                key: String::new(),
                raw_need_id: None,
                reason: DropReason::Malformed,
            });
            continue;
        };
        let mut questions = Vec::new();
        for (key, entry) in entries {
            let raw = entry.get("need_id").and_then(raw_id);
            let drop = |reason| DroppedQuestion {
                topic: topic.clone(),
                key: key.clone(),
                raw_need_id: raw.clone(),
                reason,
            };
            let Some(id) = raw.as_deref().and_then(|r| r.parse::<NeedId>().ok()) else {
                dropped.push(drop(if raw.is_some() {
                    DropReason::UnknownId
                } else {
                    DropReason::Malformed
                }));
                continue;
            };
            let Some(slot) = memo.get(id) else {
                dropped.push(drop(DropReason::UnknownId));
                continue;
            };
            if !slot.clarify {
                dropped.push(drop(DropReason::NotClarifying));
                continue;
            }
            if !seen.insert(id) {
                dropped.push(drop(DropReason::Repeated));
                continue;
            }
            let question = entry
                .get("need")
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|q| !q.is_empty())
                .unwrap_or(&slot.need)
                .to_string();
            questions.push(GroupQuestion {
                need_id: id,
                question,
            });
        }
        if !questions.is_empty() {
            groups.push(QuestionGroup { topic, questions });
        }
    }
    if groups.is_empty() {
        return Err(RankingError::EmptyRanking { dropped });
    }
    Ok(RankingOutcome { groups, dropped })
}
