use std::io::{BufRead, Write};

use needcraft_core::agents::{AgentError, Speaker};
use needcraft_core::needs_memo::{NeedId, UserEdit};
use needcraft_core::orchestrator::{
    NeedsView, Orchestrator, PanelSnapshot, SessionError, SessionMode, SessionState, UiEvent, UserInput,
};

use crate::CliError;

const HELP: &str = "commands: /needs  /solution  /skip  /skipgroup  /edit add <text>  \
/edit update <id> <text>  /edit delete <id>  /help  /quit";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Say(String),
    Needs,
    Solution,
    Skip,
    SkipGroup,
    Edit(UserEdit),
    Help,
    Quit,
}

pub fn parse_command(line: &str) -> Result<Command, String> {
    let line = line.trim();
    let Some(rest) = line.strip_prefix('/') else {
        return Ok(Command::Say(line.to_string()));
    };
    let (name, args) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    let args = args.trim();
    let id = |s: &str| s.parse::<NeedId>().map_err(|_| format!("{s:?} is not a need id"));
    match name {
        "needs" => Ok(Command::Needs),
        "solution" => Ok(Command::Solution),
        "skip" => Ok(Command::Skip),
        "skipgroup" => Ok(Command::SkipGroup),
        "help" => Ok(Command::Help),
        "quit" | "exit" => Ok(Command::Quit),
        "edit" => {
            let (op, rest) = args.split_once(char::is_whitespace).unwrap_or((args, ""));
            let rest = rest.trim();
            match op {
                "add" if !rest.is_empty() => Ok(Command::Edit(UserEdit::AddManual { need: rest.into() })),
                "delete" => Ok(Command::Edit(UserEdit::Delete { id: id(rest)? })),
                "update" => {
                    let (target, text) = rest.split_once(char::is_whitespace).ok_or("usage: /edit update <id> <text>")?;
                    Ok(Command::Edit(UserEdit::Update {
                        id: id(target)?,
                        need: text.trim().into(),
                    }))
                }
                _ => Err("usage: /edit add <text> | update <id> <text> | delete <id>".into()),
            }
        }
        other => Err(format!("unknown command /{other}; {HELP}")),
    }
}

fn speaker(s: Speaker) -> String {
    match s {
        Speaker::User => "You".into(),
        Speaker::Agent(role) => role.to_string(),
        Speaker::Assistant => "Assistant".into(),
    }
}

pub fn render_event(event: &UiEvent) -> Option<String> {
    match event {
        UiEvent::AgentMessage { speaker: s, text } => Some(format!("[{}]\n{}\n", speaker(*s), text.trim_end())),
        UiEvent::QuestionsPosted { topic, questions } => Some(format!(
            "({} question(s) on {topic}; answer with numbered lines or /skip)\n",
            questions.len()
        )),
        UiEvent::SolutionReadyNotice => Some("(solution ready; /solution shows it)\n".into()),
        UiEvent::GroundingFailure { dangling } => Some(format!(
            "warning: the solution cites needs that are not wanted: {}\n",
            dangling.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        )),
        UiEvent::TurnFailed { code, message } => Some(format!("error {code}: {message}\n")),
        UiEvent::NeedsUpdated { .. } | UiEvent::SolutionUpdated { .. } | UiEvent::PhaseChanged { .. } => None,
    }
}

pub fn render_needs(view: &NeedsView) -> String {
    let rows: Vec<_> = view.slots.iter().filter(|r| r.visible).collect();
    if rows.is_empty() {
        return "(no needs yet)\n".into();
    }
    let mut out = format!("{:<4} {:<10} {:<15} need\n", "id", "status", "origin");
    for r in rows {
        let status = match r.user_want {
            Some(true) => "wanted",
            Some(false) => "declined",
            None => "open",
        };
        out.push_str(&format!("{:<4} {:<10} {:<15} {}\n", r.id.to_string(), status, r.origin.as_str(), r.need));
    }
    out
}

pub fn render_solution(snapshot: &PanelSnapshot) -> String {
    match &snapshot.solution {
        Some(s) => format!("{}\n", s.body.trim_end()),
        None => "(no solution yet)\n".into(),
    }
}

fn write(out: &mut impl Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn print_events(out: &mut impl Write, events: &[UiEvent]) -> Result<(), CliError> {
    for text in events.iter().filter_map(render_event) {
        write(out, &text)?;
    }
    Ok(())
}

/// Backend trouble ends the session; anything else is reported and the
/// prompt continues.
fn triage(out: &mut impl Write, e: SessionError) -> Result<(), CliError> {
    match e {
        SessionError::Backend(_) => Err(e.into()),
        SessionError::Agent {
            source: AgentError::Backend(_),
            ..
        } => Err(e.into()),
        other => write(out, &format!("error {}: {other}\n", other.code())),
    }
}

/// Line-oriented terminal session. Returns the final state.
pub async fn chat(
    orch: &Orchestrator,
    session_id: &str,
    query: &str,
    mode: SessionMode,
    input: impl BufRead,
    mut out: impl Write,
) -> Result<SessionState, CliError> {
    let (mut state, events) = orch.start_session(session_id, session_id, query, mode).await?;
    print_events(&mut out, &events)?;
    for line in input.lines() {
        let line = line.map_err(|e| CliError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let result = match parse_command(&line) {
            Err(msg) => {
                write(&mut out, &format!("{msg}\n"))?;
                continue;
            }
            Ok(Command::Quit) => break,
            Ok(Command::Help) => {
                write(&mut out, &format!("{HELP}\n"))?;
                continue;
            }
            Ok(Command::Needs) => {
                write(&mut out, &render_needs(&PanelSnapshot::capture(&state).needs))?;
                continue;
            }
            Ok(Command::Solution) => {
                write(&mut out, &render_solution(&PanelSnapshot::capture(&state)))?;
                continue;
            }
            Ok(Command::Say(text)) => orch.handle_user_message(&mut state, UserInput::message(text)).await,
            Ok(Command::Skip) => orch.handle_user_message(&mut state, UserInput::Skip).await,
            Ok(Command::SkipGroup) => orch.handle_user_message(&mut state, UserInput::SkipGroup).await,
            Ok(Command::Edit(edit)) => match orch.record_manual_edit(&mut state, &edit) {
                Ok((receipt, events)) => {
                    print_events(&mut out, &events)?;
                    write(&mut out, &format!("(need {} changed; re-planning)\n", receipt.id))?;
                    if state.phase.awaits_user() {
                        Ok(Vec::new())
                    } else {
                        orch.advance(&mut state).await
                    }
                }
                Err(e) => Err(e),
            },
        };
        match result {
            Ok(events) => print_events(&mut out, &events)?,
            Err(e) => triage(&mut out, e)?,
        }
        out.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(state)
}
