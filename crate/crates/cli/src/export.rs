use std::path::Path;

use needcraft_core::orchestrator::PanelSnapshot;
use needcraft_service::store::{FileStore, SessionStore};
use serde::Serialize;

use crate::chat::{render_needs, render_solution};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    Markdown,
    Json,
}

#[derive(Debug, Serialize)]
struct Export<'a> {
    id: &'a str,
    tag: &'a str,
    query: &'a str,
    created_at: &'a str,
    panels: &'a PanelSnapshot,
}

/// Renders a stored session from its log.
pub fn export(storage: &Path, id: &str, format: ExportFormat) -> Result<String, CliError> {
    let store = FileStore::open(storage).map_err(|e| CliError::Io(e.to_string()))?;
    let recovered = store
        .load(id)
        .map_err(|e| CliError::Io(e.to_string()))?
        .recover()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let panels = PanelSnapshot::capture(&recovered.state);
    let h = &recovered.header;
    Ok(match format {
        ExportFormat::Json => {
            let doc = Export {
                id: &h.id,
                tag: &h.tag,
                query: &h.query,
                created_at: &h.created_at,
                panels: &panels,
            };
            serde_json::to_string_pretty(&doc).expect("export serializes") + "\n"
        }
        ExportFormat::Markdown => {
            let mut out = format!("# Session {}\n\nQuery: {}\n\nMode: {}\n\n## Chat\n\n", h.id, h.query, h.mode.as_str());
            for line in &panels.chat.messages {
                let who = serde_json::to_value(line.speaker).expect("speaker serializes");
                let who = who.as_str().map(str::to_string).unwrap_or_else(|| who.to_string());
                out.push_str(&format!("**{who}**\n\n{}\n\n", line.text.trim_end()));
            }
            out.push_str("## Needs\n\n```\n");
            out.push_str(&render_needs(&panels.needs));
            out.push_str("```\n\n## Solution\n\n");
            out.push_str(&render_solution(&panels));
            out
        }
    })
}
