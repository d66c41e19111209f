use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use needcraft_core::agents::PromptPack;
use needcraft_core::llm_backend::{ChatBackend, RecordingBackend, ScriptedBackend};
use needcraft_core::orchestrator::{Expectation, Orchestrator, PanelSnapshot, Scenario, UiEvent};
use serde_json::Value;

use crate::CliError;

/// Where the replayed trace first departs from the expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDiff {
    pub index: usize,
    pub expected: Option<UiEvent>,
    pub actual: Option<UiEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub events: usize,
    pub event_diff: Option<EventDiff>,
    /// JSON paths whose values differ in the final snapshot.
    pub snapshot_diff: Vec<String>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.event_diff.is_none() && self.snapshot_diff.is_empty()
    }
}

fn show(event: &Option<UiEvent>) -> String {
    match event {
        Some(e) => serde_json::to_string(e).expect("event serializes"),
        None => "<end of trace>".into(),
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "PASS: {} events and final snapshot match", self.events);
        }
        writeln!(f, "ExpectationMismatch")?;
        if let Some(d) = &self.event_diff {
            writeln!(f, "  first divergent event #{}:", d.index)?;
            writeln!(f, "    expected: {}", show(&d.expected))?;
            writeln!(f, "    actual:   {}", show(&d.actual))?;
        }
        if !self.snapshot_diff.is_empty() {
            writeln!(f, "  snapshot differs at:")?;
            for path in &self.snapshot_diff {
                writeln!(f, "    {path}")?;
            }
        }
        Ok(())
    }
}

pub fn first_divergence(expected: &[UiEvent], actual: &[UiEvent]) -> Option<EventDiff> {
    let n = expected.len().max(actual.len());
    (0..n).find(|&i| expected.get(i) != actual.get(i)).map(|index| EventDiff {
        index,
        expected: expected.get(index).cloned(),
        actual: actual.get(index).cloned(),
    })
}

/// Leaf paths where two JSON documents differ.
pub fn json_diff(expected: &Value, actual: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk("$", expected, actual, &mut out);
    out
}

fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                match y.get(k) {
                    Some(w) => walk(&format!("{path}.{k}"), v, w, out),
                    None => out.push(format!("{path}.{k} (missing)")),
                }
            }
            for k in y.keys().filter(|k| !x.contains_key(*k)) {
                out.push(format!("{path}.{k} (unexpected)"));
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            for i in 0..x.len().max(y.len()) {
                match (x.get(i), y.get(i)) {
                    (Some(v), Some(w)) => walk(&format!("{path}[{i}]"), v, w, out),
                    (Some(_), None) => out.push(format!("{path}[{i}] (missing)")),
                    _ => out.push(format!("{path}[{i}] (unexpected)")),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

pub fn compare(expectation: &Expectation, events: &[UiEvent], snapshot: &PanelSnapshot) -> ReplayReport {
    let expected = serde_json::to_value(&expectation.snapshot).expect("snapshot serializes");
    let actual = serde_json::to_value(snapshot).expect("snapshot serializes");
    ReplayReport {
        events: events.len(),
        event_diff: first_divergence(&expectation.events, events),
        snapshot_diff: json_diff(&expected, &actual),
    }
}

pub fn read_expectation(path: &Path) -> Result<Expectation, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Runs the expectation's scenario against recorded fixtures and diffs the outcome.
pub async fn replay(pack: &PromptPack, fixtures: &Path, expectation: &Expectation) -> Result<ReplayReport, CliError> {
    let backend = ScriptedBackend::from_file(fixtures)?.strict(true);
    let orch = Orchestrator::new(pack, Arc::new(backend));
    let run = expectation.scenario.run(&orch).await?;
    let snapshot = PanelSnapshot::capture(&run.state);
    Ok(compare(expectation, &run.events, &snapshot))
}

/// Runs a scenario on `backend`, recording every call, and returns the
/// expectation it produced. Fixtures are written to `fixtures`.
pub async fn record(
    pack: &PromptPack,
    backend: Arc<dyn ChatBackend>,
    scenario: &Scenario,
    fixtures: &Path,
) -> Result<Expectation, CliError> {
    let recorder = Arc::new(RecordingBackend::new(backend));
    let orch = Orchestrator::new(pack, recorder.clone());
    let run = scenario.run(&orch).await?;
    needcraft_core::llm_backend::write_fixtures(fixtures, &recorder.fixtures())?;
    Ok(Expectation {
        scenario: scenario.clone(),
        events: run.events,
        snapshot: PanelSnapshot::capture(&run.state),
    })
}
