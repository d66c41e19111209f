use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::needs_memo::{NeedId, NeedsMemo, WantStatus};

/// One `Need ID: <digits>` citation inside a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedRef {
    pub id: NeedId,
    /// Byte offset of the citation start.
    pub start: usize,
    /// Byte offset one past the last digit.
    pub end: usize,
}

/// A solution body together with the citations found in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSolution {
    pub body: String,
    pub refs: Vec<NeedRef>,
    /// Memo revision the solution was written against.
    pub revision_basis: u64,
}

impl AnnotatedSolution {
    pub fn new(body: impl Into<String>, revision_basis: u64) -> Self {
        let body = body.into();
        let refs = extract_need_refs(&body);
        Self {
            body,
            refs,
            revision_basis,
        }
    }

    pub fn cited_ids(&self) -> BTreeSet<NeedId> {
        self.refs.iter().map(|r| r.id).collect()
    }
}

fn citation_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"Need ID:[ \t]*([0-9]+)").expect("valid pattern"))
}

/// Finds every `Need ID: <digits>` citation, in order of appearance.
///
/// Surrounding parentheses or backticks are not part of the grammar and are
/// simply ignored; a cluster such as `(Need ID: 003, Need ID: 004)` yields
/// one ref per id. Ids too large to represent are skipped.
pub fn extract_need_refs(body: &str) -> Vec<NeedRef> {
    citation_pattern()
        .captures_iter(body)
        .filter_map(|caps| {
            let whole = caps.get(0)?;
            let id = caps.get(1)?.as_str().parse::<NeedId>().ok()?;
            Some(NeedRef {
                id,
                start: whole.start(),
                end: whole.end(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefReport {
    /// Cited ids that are missing from the memo or not wanted.
    pub dangling: Vec<NeedId>,
    /// Wanted ids the solution never cites. Informational only.
    pub uncited_wanted: Vec<NeedId>,
}

impl RefReport {
    pub fn is_grounded(&self) -> bool {
        self.dangling.is_empty()
    }
}

pub fn validate_solution_refs(solution: &AnnotatedSolution, memo: &NeedsMemo) -> RefReport {
    let cited = solution.cited_ids();
    let wanted: BTreeSet<NeedId> = memo
        .slots()
        .filter(|s| s.want == WantStatus::Wanted)
        .map(|s| s.id)
        .collect();
    RefReport {
        dangling: cited.difference(&wanted).copied().collect(),
        uncited_wanted: wanted.difference(&cited).copied().collect(),
    }
}
