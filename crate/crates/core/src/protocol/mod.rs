//! Text protocols spoken between agents: control tokens, the ranking JSON,
//! and `Need ID` citations in solutions. Everything here is pure.

mod ranking;
mod refs;
mod tokens;

pub use ranking::{
    extract_json_object, parse_ranking_output, DropReason, DroppedQuestion, GroupQuestion,
    QuestionGroup, RankingError, RankingOutcome,
};
pub use refs::{extract_need_refs, validate_solution_refs, AnnotatedSolution, NeedRef, RefReport};
pub use tokens::{parse_control_tokens, ControlToken, ParsedTokens, TokenHit};
