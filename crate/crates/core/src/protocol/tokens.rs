use std::fmt;

use serde::{Deserialize, Serialize};

/// Bracketed markers agents emit to hand control to the next step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ControlToken {
    BeginMilestone,
    Inquiry,
    MilestoneEnd,
    BeginPlan,
    #[serde(rename = "DISCOVEREND")]
    DiscoverEnd,
    SolutionEnd,
}

impl ControlToken {
    pub const ALL: [ControlToken; 6] = [
        ControlToken::BeginMilestone,
        ControlToken::Inquiry,
        ControlToken::MilestoneEnd,
        ControlToken::BeginPlan,
        ControlToken::DiscoverEnd,
        ControlToken::SolutionEnd,
    ];

    /// The exact, case-sensitive text of the marker.
    pub const fn surface(self) -> &'static str {
        match self {
            ControlToken::BeginMilestone => "[BeginMilestone]",
            ControlToken::Inquiry => "[Inquiry]",
            ControlToken::MilestoneEnd => "[MilestoneEnd]",
            ControlToken::BeginPlan => "[BeginPlan]",
            ControlToken::DiscoverEnd => "[DISCOVEREND]",
            ControlToken::SolutionEnd => "[SolutionEnd]",
        }
    }

    pub fn from_surface(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.surface() == s)
    }
}

impl fmt::Display for ControlToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

/// A token found in agent output, with the byte offset in the cleaned body
/// where it was removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHit {
    pub token: ControlToken,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedTokens {
    pub hits: Vec<TokenHit>,
    pub body: String,
}

impl ParsedTokens {
    pub fn tokens(&self) -> Vec<ControlToken> {
        self.hits.iter().map(|h| h.token).collect()
    }

    pub fn contains(&self, token: ControlToken) -> bool {
        self.hits.iter().any(|h| h.token == token)
    }

    /// Puts the tokens back at their recorded offsets.
    pub fn reinsert(&self) -> String {
        let mut out = String::with_capacity(self.body.len() + self.hits.len() * 16);
        let mut cursor = 0;
        for hit in &self.hits {
            out.push_str(&self.body[cursor..hit.offset]);
            out.push_str(hit.token.surface());
            cursor = hit.offset;
        }
        out.push_str(&self.body[cursor..]);
        out
    }
}

/// Whitespace that sat next to a removed token.
#[derive(Default, Clone, Copy)]
struct Gap {
    any: bool,
    newlines: usize,
}

impl Gap {
    fn absorb(&mut self, run: &str) {
        if !run.is_empty() {
            self.any = true;
            self.newlines = self.newlines.max(run.matches('\n').count());
        }
    }

    fn separator(self) -> &'static str {
        match (self.any, self.newlines) {
            (false, _) => "",
            (true, 0) => " ",
            (true, 1) => "\n",
            _ => "\n\n",
        }
    }
}

fn match_token_at(text: &str, at: usize) -> Option<ControlToken> {
    let rest = &text[at..];
    ControlToken::ALL
        .into_iter()
        .find(|t| rest.starts_with(t.surface()))
}

/// Splits agent output into the control tokens it carries and the remaining
/// text. Tokens are removed and the whitespace around each removal point is
/// collapsed to a single separator; unknown bracketed text is left alone.
pub fn parse_control_tokens(text: &str) -> ParsedTokens {
    let mut pieces: Vec<&str> = Vec::new();
    let mut found: Vec<ControlToken> = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        if text.as_bytes()[i] == b'[' {
            if let Some(token) = match_token_at(text, i) {
                pieces.push(&text[start..i]);
                found.push(token);
                i += token.surface().len();
                start = i;
                continue;
            }
        }
        i += 1;
    }
    pieces.push(&text[start..]);

    let mut body = String::with_capacity(text.len());
    let mut hits = Vec::with_capacity(found.len());
    let mut gap = Gap::default();
    for (k, piece) in pieces.iter().enumerate() {
        let core = piece.trim();
        if core.is_empty() {
            gap.absorb(piece);
        } else {
            let lead_len = piece.len() - piece.trim_start().len();
            gap.absorb(&piece[..lead_len]);
            if !body.is_empty() {
                body.push_str(gap.separator());
            }
            body.push_str(core);
            gap = Gap::default();
            gap.absorb(&piece[lead_len + core.len()..]);
        }
        if let Some(&token) = found.get(k) {
            hits.push(TokenHit {
                token,
                offset: body.len(),
            });
        }
    }
    ParsedTokens { hits, body }
}
