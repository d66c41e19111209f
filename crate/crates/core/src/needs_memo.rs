//! The needs memo: the shared, user-visible store of need slots.
//!
//! Every agent reads the memo through tool calls and the user edits it
//! directly from the needs panel. Slots are keyed by an incremental
//! [`NeedId`] that is never reused, and every mutation bumps the memo
//! revision by exactly one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;

/// Identifier of a need slot, rendered as a zero-padded decimal ("001").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeedId(u32);

impl NeedId {
    pub const fn new(value: u32) -> Self {
        Self(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for NeedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid need id {0:?}")]
pub struct ParseNeedIdError(pub String);

impl FromStr for NeedId {
    type Err = ParseNeedIdError;

    /// Accepts any run of ASCII digits, so "1" and "001" name the same slot.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ParseNeedIdError(s.to_string()));
        }
        t.parse::<u32>()
            .map(NeedId)
            .map_err(|_| ParseNeedIdError(s.to_string()))
    }
}

impl Serialize for NeedId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NeedId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether the user wants a need addressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WantStatus {
    Wanted,
    Declined,
    Unanswered,
}

impl WantStatus {
    /// The `user_want` encoding used on the wire: true, false or null.
    pub fn to_wire(self) -> Option<bool> {
        match self {
            WantStatus::Wanted => Some(true),
            WantStatus::Declined => Some(false),
            WantStatus::Unanswered => None,
        }
    }

    pub fn from_wire(value: Option<bool>) -> Self {
        match value {
            Some(true) => WantStatus::Wanted,
            Some(false) => WantStatus::Declined,
            None => WantStatus::Unanswered,
        }
    }
}

/// Where a need came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedOrigin {
    /// Stated outright by the user and extracted by the discovery role.
    UserExplicit,
    /// Implicit or latent need hypothesised by an agent.
    AgentInferred,
    /// Typed by the user into the needs panel.
    UserManual,
}

impl NeedOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            NeedOrigin::UserExplicit => "user_explicit",
            NeedOrigin::AgentInferred => "agent_inferred",
            NeedOrigin::UserManual => "user_manual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedSlot {
    pub id: NeedId,
    /// The need description, or the clarification question while `clarify` is set.
    pub need: String,
    pub clarify: bool,
    pub want: WantStatus,
    pub origin: NeedOrigin,
    pub created_seq: u64,
    pub updated_seq: u64,
}

/// A change requested from the needs panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum UserEdit {
    AddManual { need: String },
    Update { id: NeedId, need: String },
    Delete { id: NeedId },
}

impl UserEdit {
    pub fn target(&self) -> Option<NeedId> {
        match self {
            UserEdit::AddManual { .. } => None,
            UserEdit::Update { id, .. } | UserEdit::Delete { id } => Some(*id),
        }
    }
}

/// Result of a successful user edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditReceipt {
    pub revision: u64,
    /// The slot created, updated or deleted.
    pub id: NeedId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoError {
    #[error("need text is empty")]
    EmptyNeed,
    #[error("need duplicates existing slot {0}")]
    DuplicateNeed(NeedId),
    #[error("invalid slot combination: {0}")]
    InvalidCombination(&'static str),
    #[error("unknown need id {0}")]
    UnknownNeedId(NeedId),
    #[error("need {0} is already clarified")]
    AlreadyClarified(NeedId),
    #[error("a clarification answer must be wanted or declined")]
    InvalidWant,
    #[error("need {0} was declined and cannot be re-asked")]
    ReopenNotSupported(NeedId),
}

impl MemoError {
    /// Machine-readable code used in problem details and tool results.
    pub fn code(&self) -> &'static str {
        match self {
            MemoError::EmptyNeed => "EmptyNeed",
            MemoError::DuplicateNeed(_) => "DuplicateNeed",
            MemoError::InvalidCombination(_) => "InvalidCombination",
            MemoError::UnknownNeedId(_) => "UnknownNeedId",
            MemoError::AlreadyClarified(_) => "AlreadyClarified",
            MemoError::InvalidWant => "InvalidWant",
            MemoError::ReopenNotSupported(_) => "ReopenNotSupported",
        }
    }
}

/// The three disjoint views returned by [`NeedsMemo::get_all_needs`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NeedsPartition {
    pub wanted: Vec<NeedSlot>,
    pub declined: Vec<NeedSlot>,
    pub unanswered: Vec<NeedSlot>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedsMemo {
    slots: BTreeMap<NeedId, NeedSlot>,
    next_id: u32,
    revision: u64,
}

/// Lowercased, whitespace-collapsed form used for duplicate detection.
fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn clean(text: &str) -> Result<String, MemoError> {
    let t = text.trim();
    if t.is_empty() {
        Err(MemoError::EmptyNeed)
    } else {
        Ok(t.to_string())
    }
}

impl NeedsMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: NeedId) -> Option<&NeedSlot> {
        self.slots.get(&id)
    }

    /// Live slots in ascending id order.
    pub fn slots(&self) -> impl Iterator<Item = &NeedSlot> {
        self.slots.values()
    }

    /// The id the next created slot will receive.
    pub fn peek_next_id(&self) -> NeedId {
        NeedId(self.next_id)
    }

    fn find_duplicate(&self, text: &str) -> Option<NeedId> {
        let key = normalize(text);
        self.slots
            .values()
            .find(|s| normalize(&s.need) == key)
            .map(|s| s.id)
    }

    fn bump(&mut self) -> u64 {
        self.revision += 1;
        self.revision
    }

    pub fn add_need_slot(
        &mut self,
        need: &str,
        clarify: bool,
        want: WantStatus,
        origin: NeedOrigin,
    ) -> Result<NeedId, MemoError> {
        let need = clean(need)?;
        if clarify && want != WantStatus::Unanswered {
            return Err(MemoError::InvalidCombination(
                "a slot needing clarification must be unanswered",
            ));
        }
        if !clarify && want == WantStatus::Unanswered {
            return Err(MemoError::InvalidCombination(
                "an unanswered slot must be marked for clarification",
            ));
        }
        if clarify && origin != NeedOrigin::AgentInferred {
            return Err(MemoError::InvalidCombination(
                "only inferred needs can require clarification",
            ));
        }
        if origin == NeedOrigin::UserExplicit && want != WantStatus::Wanted {
            return Err(MemoError::InvalidCombination(
                "an explicit need is always wanted",
            ));
        }
        if let Some(existing) = self.find_duplicate(&need) {
            return Err(MemoError::DuplicateNeed(existing));
        }
        let id = NeedId(self.next_id);
        self.next_id += 1;
        let seq = self.bump();
        self.slots.insert(
            id,
            NeedSlot {
                id,
                need,
                clarify,
                want,
                origin,
                created_seq: seq,
                updated_seq: seq,
            },
        );
        Ok(id)
    }

    /// Records the user's answer to a clarification question.
    pub fn fill_need_slot(
        &mut self,
        id: NeedId,
        answer: &str,
        want: WantStatus,
    ) -> Result<NeedSlot, MemoError> {
        let slot = self.slots.get(&id).ok_or(MemoError::UnknownNeedId(id))?;
        if !slot.clarify {
            return Err(match slot.want {
                WantStatus::Declined => MemoError::ReopenNotSupported(id),
                _ => MemoError::AlreadyClarified(id),
            });
        }
        if want == WantStatus::Unanswered {
            return Err(MemoError::InvalidWant);
        }
        let answer = clean(answer)?;
        let seq = self.bump();
        let slot = self.slots.get_mut(&id).expect("checked above");
        slot.need = answer;
        slot.clarify = false;
        slot.want = want;
        slot.updated_seq = seq;
        Ok(slot.clone())
    }

    pub fn apply_user_edit(&mut self, edit: &UserEdit) -> Result<EditReceipt, MemoError> {
        match edit {
            UserEdit::AddManual { need } => {
                let id = self.add_need_slot(
                    need,
                    false,
                    WantStatus::Wanted,
                    NeedOrigin::UserManual,
                )?;
                Ok(EditReceipt {
                    revision: self.revision,
                    id,
                })
            }
            UserEdit::Update { id, need } => {
                if !self.slots.contains_key(id) {
                    return Err(MemoError::UnknownNeedId(*id));
                }
                let need = clean(need)?;
                let seq = self.bump();
                let slot = self.slots.get_mut(id).expect("checked above");
                slot.need = need;
                slot.updated_seq = seq;
                Ok(EditReceipt {
                    revision: seq,
                    id: *id,
                })
            }
            UserEdit::Delete { id } => {
                if self.slots.remove(id).is_none() {
                    return Err(MemoError::UnknownNeedId(*id));
                }
                Ok(EditReceipt {
                    revision: self.bump(),
                    id: *id,
                })
            }
        }
    }

    pub fn get_all_needs(&self) -> NeedsPartition {
        let mut out = NeedsPartition::default();
        for slot in self.slots.values() {
            let bucket = match slot.want {
                WantStatus::Wanted => &mut out.wanted,
                WantStatus::Declined => &mut out.declined,
                WantStatus::Unanswered => &mut out.unanswered,
            };
            bucket.push(slot.clone());
        }
        out
    }

    pub fn get_clarify_needs(&self) -> Vec<NeedSlot> {
        self.slots.values().filter(|s| s.clarify).cloned().collect()
    }

    pub fn get_user_want_needs(&self) -> Vec<NeedSlot> {
        self.slots
            .values()
            .filter(|s| s.want == WantStatus::Wanted)
            .cloned()
            .collect()
    }

    /// Canonical dictionary form: keyed by id, fields in a fixed order.
    pub fn to_canonical(&self) -> Value {
        slots_to_canonical(self.slots.values())
    }
}

/// Renders slots in the canonical memo dictionary format.
pub fn slots_to_canonical<'a>(slots: impl IntoIterator<Item = &'a NeedSlot>) -> Value {
    let mut map = Map::new();
    for slot in slots {
        map.insert(
            slot.id.to_string(),
            json!({
                "need": slot.need,
                "clarify": slot.clarify,
                "user_want": slot.want.to_wire(),
                "origin": slot.origin.as_str(),
            }),
        );
    }
    Value::Object(map)
}
