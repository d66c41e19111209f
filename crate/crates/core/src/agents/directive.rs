//! Engine-authored instructions appended to an agent's context, and the
//! fixed relay texts the engine writes on the Inquiry agent's behalf.

use crate::needs_memo::{NeedId, UserEdit};
use crate::protocol::GroupQuestion;

const ASK_HEAD: &str = "The Ranking-Agent has grouped the clarification questions. Ask the user the following questions now.";
const ANSWERS_HEAD: &str = "The user has replied to these questions:";
const NEXT_HEAD: &str = "Next, ask the user the following questions.";
const DONE_HEAD: &str = "All question groups have been asked.";
const TOPIC: &str = "Topic: ";
const ITEM: &str = "- Need ID: ";

fn push_batch(out: &mut String, topic: &str, questions: &[GroupQuestion]) {
    out.push_str(TOPIC);
    out.push_str(&topic.replace('\n', " "));
    out.push('\n');
    for q in questions {
        out.push_str(&format!("{ITEM}{} | {}\n", q.need_id, q.question.replace('\n', " ")));
    }
}

/// Directive for the turn that poses the first batch of a ranking round.
pub fn ask_directive(topic: &str, questions: &[GroupQuestion]) -> String {
    let mut out = format!("{ASK_HEAD}\n");
    push_batch(&mut out, topic, questions);
    out.push_str(&format!(
        "Ask exactly these {} question(s) as a numbered list, simplified and with default options where helpful. End your message with [Inquiry].",
        questions.len()
    ));
    out
}

/// Directive for the turn that processes the user's answers.
pub fn answers_directive(
    asked_topic: &str,
    asked: &[GroupQuestion],
    next: Option<(&str, &[GroupQuestion])>,
) -> String {
    let mut out = format!("{ANSWERS_HEAD}\n");
    push_batch(&mut out, asked_topic, asked);
    out.push_str("Call fill_need_slot once for every question the user answered. Use the Need ID as need_id, write a detailed description of the user's need in need, and set user_want to true, or to false if the user does not want it or declined to answer.\n");
    match next {
        Some((topic, questions)) => {
            out.push_str(&format!("{NEXT_HEAD}\n"));
            push_batch(&mut out, topic, questions);
            out.push_str(&format!(
                "Ask exactly these {} question(s) as a numbered list and end your message with [Inquiry]. If the user asked to stop answering questions and see the solution right away, do not ask them: tell the Milestone-Agent so, include any feedback from the user, and end with [BeginMilestone].",
                questions.len()
            ));
        }
        None => out.push_str(&format!(
            "{DONE_HEAD} Tell the Milestone-Agent what you learned from the user, including any feedback, and end your message with [BeginMilestone]."
        )),
    }
    out
}

/// Parsed form of a directive, used by rule-based backends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Ask {
        topic: String,
        questions: Vec<GroupQuestion>,
    },
    Answers {
        topic: String,
        asked: Vec<GroupQuestion>,
        next: Option<(String, Vec<GroupQuestion>)>,
    },
}

fn parse_batch<'a>(lines: &mut std::iter::Peekable<impl Iterator<Item = &'a str>>) -> Option<(String, Vec<GroupQuestion>)> {
    let topic = lines.next()?.strip_prefix(TOPIC)?.to_string();
    let mut questions = Vec::new();
    while let Some(item) = lines.peek().and_then(|l| l.strip_prefix(ITEM)) {
        let (id, question) = item.split_once(" | ")?;
        questions.push(GroupQuestion {
            need_id: id.parse::<NeedId>().ok()?,
            question: question.to_string(),
        });
        lines.next();
    }
    Some((topic, questions))
}

pub fn parse_directive(text: &str) -> Option<Directive> {
    let mut lines = text.lines().peekable();
    match lines.next()? {
        ASK_HEAD => {
            let (topic, questions) = parse_batch(&mut lines)?;
            Some(Directive::Ask { topic, questions })
        }
        ANSWERS_HEAD => {
            let (topic, asked) = parse_batch(&mut lines)?;
            let mut next = None;
            while let Some(line) = lines.next() {
                if line == NEXT_HEAD {
                    next = Some(parse_batch(&mut lines)?);
                    break;
                }
            }
            Some(Directive::Answers { topic, asked, next })
        }
        _ => None,
    }
}

/// Relay written when the user asks to skip the remaining questions.
pub fn skip_relay() -> String {
    "The user does not want to answer more questions and wants to see the solution immediately.".into()
}

/// Relay written when the user declines a whole question group.
pub fn skip_group_relay(topic: &str) -> String {
    format!("The user has no needs regarding \"{topic}\" and skipped those questions.")
}

/// Relay written after a manual edit in the needs panel.
pub fn manual_edit_relay(edit: &UserEdit, id: NeedId) -> String {
    let what = match edit {
        UserEdit::AddManual { need } => format!("added need {id}: {need}"),
        UserEdit::Update { need, .. } => format!("changed need {id} to: {need}"),
        UserEdit::Delete { .. } => format!("deleted need {id}"),
    };
    format!("The user has manually updated their requirements: {what}.")
}

/// Whether a user reply asks to stop answering questions.
pub fn is_skip_request(text: &str) -> bool {
    let t = text.trim().to_lowercase();
    t == "skip"
        || ["skip the rest", "skip all", "show me the plan", "show me the solution", "stop asking"]
            .iter()
            .any(|p| t.contains(p))
}

/// Message telling the user the solution is ready.
pub fn solution_ready_notice() -> String {
    "Your solution is ready! Please check the Solution panel. If anything should change, tell me here or edit your needs directly in the Needs panel.".into()
}
