//! Acceptance gate: one PASS/FAIL line per primary criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use needcraft_core::agents::{allowed_tools, AgentError, AgentRole, PromptPack, ToolName};
use needcraft_core::llm_backend::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, ScriptedBackend, SimulatedBackend, SimulationConfig, ToolCall,
};
use needcraft_core::needs_memo::{NeedId, NeedOrigin, NeedsMemo, UserEdit, WantStatus};
use needcraft_core::orchestrator::{
    next_batch, numbered_answers, Expectation, Orchestrator, PanelSnapshot, Phase, SessionError, SessionMode,
    SessionState, UiEvent, UserInput, MAX_BATCH,
};
use needcraft_core::protocol::{
    extract_need_refs, parse_control_tokens, parse_ranking_output, validate_solution_refs, ControlToken, GroupQuestion,
    QuestionGroup,
};
use needcraft_service::{FileStore, ServiceConfig, SessionManager, SessionStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The source document the prompt tables and sample solution are taken from.
fn reference_path() -> PathBuf {
    root().join("paper.md")
}

fn read(path: PathBuf) -> Result<String, String> {
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn care(backend: impl ChatBackend + 'static) -> Orchestrator {
    Orchestrator::new(&PromptPack::builtin(), Arc::new(backend))
}

fn simulated(config: SimulationConfig) -> Orchestrator {
    care(SimulatedBackend::new(config))
}

fn phase_trace(events: &[UiEvent]) -> Vec<&'static str> {
    events
        .iter()
        .filter_map(|e| match e {
            UiEvent::PhaseChanged { phase } => Some(phase.name()),
            _ => None,
        })
        .collect()
}

fn count(events: &[UiEvent], kind: &str) -> usize {
    events.iter().filter(|e| e.kind() == kind).count()
}

async fn answer_all(orch: &Orchestrator, s: &mut SessionState, text: &str) -> Result<Vec<UiEvent>, SessionError> {
    let n = s.posted.as_ref().map_or(0, |b| b.questions.len()).max(1);
    orch.handle_user_message(s, UserInput::message(numbered_answers(n, text))).await
}

async fn until_ready(orch: &Orchestrator, s: &mut SessionState, events: &mut Vec<UiEvent>) -> Result<(), String> {
    for _ in 0..30 {
        match s.phase {
            Phase::SolutionReady => return Ok(()),
            Phase::Inquiring { .. } => events.extend(answer_all(orch, s, "Yes please").await.map_err(|e| e.to_string())?),
            other => return Err(format!("stuck in {other}")),
        }
    }
    Err("no solution after 30 replies".into())
}

// 1. Hawaii golden.
async fn hawaii_golden() -> Outcome {
    let started = Instant::now();
    let fixtures = root().join("fixtures/hawaii.jsonl");
    let expectation: Expectation =
        serde_json::from_str(&read(root().join("fixtures/hawaii.expect.json"))?).map_err(|e| e.to_string())?;
    let backend = ScriptedBackend::from_file(&fixtures).map_err(|e| e.to_string())?.strict(true);
    let orch = care(backend);

    // Start alone, then the scripted answers.
    let (s, start_events) = orch
        .start_session("hawaii", "hawaii", &expectation.scenario.query, SessionMode::Care)
        .await
        .map_err(|e| e.to_string())?;
    let trace = phase_trace(&start_events);
    ensure(trace == ["milestone_decision", "needs_discovery", "ranking", "inquiring"], || {
        format!("start trace {trace:?}")
    })?;
    let needs: Vec<String> = s.memo.slots().map(|x| x.need.to_lowercase()).collect();
    for want in ["the destination is hawaii", "the trip duration is 5 days"] {
        ensure(needs.iter().any(|n| n.contains(want)), || format!("no slot matching {want:?} in {needs:?}"))?;
    }

    let run = expectation.scenario.run(&orch).await.map_err(|e| e.to_string())?;
    ensure(run.state.phase == Phase::SolutionReady, || format!("ended in {}", run.state.phase))?;
    let plan_seen = run.state.transcript.iter().any(|e| e.tokens.contains(&ControlToken::BeginPlan));
    ensure(plan_seen, || "no [BeginPlan] in transcript".into())?;
    let solution = run.state.solution.as_ref().ok_or("no solution")?;
    let report = validate_solution_refs(solution, &run.state.memo);
    ensure(report.dangling.is_empty(), || format!("dangling {:?}", report.dangling))?;
    ensure(!solution.refs.is_empty(), || "solution cites nothing".into())?;
    ensure(run.events == expectation.events, || "event trace differs from expectation".into())?;
    ensure(PanelSnapshot::capture(&run.state) == expectation.snapshot, || "snapshot differs".into())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{} events, {} refs, 0 dangling, {:.0?}", run.events.len(), solution.refs.len(), elapsed))
}

/// The body of the table whose label is `tab:<label>`.
fn reference_table(reference: &str, label: &str) -> Result<String, String> {
    let tag = format!("\\label{{tab:{label}}}");
    let end = reference.find(&tag).ok_or_else(|| format!("no {tag}"))?;
    let start = reference[..end].rfind("\\begin{table").ok_or("no table start")?;
    Ok(reference[start..end].replace("\\_", "_"))
}

// 2. Protocol goldens.
fn protocol_goldens() -> Outcome {
    let reference = read(reference_path())?;
    let expected: BTreeSet<NeedId> = (1..=10).map(NeedId::new).collect();

    // Ids cited in the sample solution, which follows the prompt table.
    let label = reference.find("\\label{tab:solution}").ok_or("no solution table")?;
    let sample = &reference[label..];
    let cited: BTreeSet<NeedId> = sample
        .match_indices("Need ID: ")
        .filter_map(|(i, m)| sample[i + m.len()..].get(..3)?.parse().ok())
        .collect();
    ensure(cited == expected, || format!("sample solution cites {cited:?}"))?;
    let golden = read(root().join("crates/core/tests/golden/sample_solution.md"))?;
    let refs: BTreeSet<NeedId> = extract_need_refs(&golden).into_iter().map(|r| r.id).collect();
    ensure(refs == expected, || format!("extracted {refs:?}"))?;

    // The ranking schema skeleton with real ids filled in.
    let schema_table = reference_table(&reference, "ranking")?;
    let start = schema_table.find("```json").ok_or("no json block")? + "```json".len();
    let len = schema_table[start..].find("\"\"").ok_or("no block end")?;
    let mut next = 0;
    let skeleton: String = schema_table[start..start + len]
        .replace("{{", "{")
        .replace("}}", "}")
        .lines()
        .filter(|l| l.trim() != "...")
        .map(|l| {
            if l.contains("The id of user need.") {
                next += 1;
                l.replace("The id of user need.", &format!("{:03}", next - 1))
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut memo = NeedsMemo::new();
    for i in 0..next {
        memo.add_need_slot(&format!("Question {i}?"), true, WantStatus::Unanswered, NeedOrigin::AgentInferred)
            .map_err(|e| e.to_string())?;
    }
    // Dropping the ellipses leaves commas before closing braces.
    let skeleton: String = skeleton
        .char_indices()
        .filter(|&(i, c)| c != ',' || !skeleton[i + 1..].trim_start().starts_with('}'))
        .map(|(_, c)| c)
        .collect();
    let outcome = parse_ranking_output(&skeleton, &memo).map_err(|e| format!("{e}: {skeleton}"))?;
    let sizes: Vec<usize> = outcome.groups.iter().map(|g| g.questions.len()).collect();
    ensure(sizes == [2, 1], || format!("group sizes {sizes:?}"))?;

    // Every control token survives parse and reinsertion.
    for token in ControlToken::ALL {
        let text = format!("Before {token} after");
        let parsed = parse_control_tokens(&text);
        ensure(parsed.tokens() == [token], || format!("{token} parsed as {:?}", parsed.tokens()))?;
        let again = parse_control_tokens(&parsed.reinsert());
        ensure(again == parsed && parsed.body == "Before after", || format!("{token} did not round-trip"))?;
        ensure(ControlToken::from_surface(token.surface()) == Some(token), || format!("{token} surface"))?;
        let json = serde_json::to_string(&token).map_err(|e| e.to_string())?;
        ensure(serde_json::from_str::<ControlToken>(&json).ok() == Some(token), || format!("{token} serde"))?;
    }
    Ok("refs {001..010}, groups [2, 1], 6/6 tokens".into())
}

// 3. Memo property suite.
fn memo_properties() -> Outcome {
    const TEXTS: [&str; 6] = ["Beach hotel", "beach  HOTEL", "Rental car", "Vegan food", "Snorkel tour", "  "];
    let wants = [WantStatus::Wanted, WantStatus::Declined, WantStatus::Unanswered];
    let origins = [NeedOrigin::UserExplicit, NeedOrigin::AgentInferred, NeedOrigin::UserManual];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total_ops = 0usize;
    for case in 0..10_000 {
        let mut memo = NeedsMemo::new();
        let initial = memo.revision();
        let mut mutations = 0u64;
        let mut issued: BTreeSet<NeedId> = BTreeSet::new();
        for _ in 0..rng.random_range(0..40) {
            total_ops += 1;
            let live: Vec<NeedId> = memo.slots().map(|s| s.id).collect();
            let pick = |rng: &mut ChaCha8Rng| live.get(rng.random_range(0..live.len() + 2)).copied().unwrap_or(memo.peek_next_id());
            let text = TEXTS[rng.random_range(0..TEXTS.len())];
            let before = memo.clone();
            let (ok, created) = match rng.random_range(0..5) {
                0 => {
                    let r = memo.add_need_slot(text, rng.random(), wants[rng.random_range(0..3)], origins[rng.random_range(0..3)]);
                    (r.is_ok(), r.ok())
                }
                1 => {
                    let id = pick(&mut rng);
                    (memo.fill_need_slot(id, text, wants[rng.random_range(0..3)]).is_ok(), None)
                }
                2 => {
                    let r = memo.apply_user_edit(&UserEdit::AddManual { need: text.into() });
                    (r.is_ok(), r.ok().map(|r| r.id))
                }
                3 => {
                    let id = pick(&mut rng);
                    (memo.apply_user_edit(&UserEdit::Update { id, need: text.into() }).is_ok(), None)
                }
                _ => {
                    let id = pick(&mut rng);
                    (memo.apply_user_edit(&UserEdit::Delete { id }).is_ok(), None)
                }
            };
            if ok {
                mutations += 1;
            } else {
                ensure(memo == before, || format!("case {case}: failed op changed the memo"))?;
            }
            if let Some(id) = created {
                ensure(issued.iter().all(|old| *old < id), || format!("case {case}: id {id} reused"))?;
                issued.insert(id);
            }
            let p = memo.get_all_needs();
            let mut seen = BTreeSet::new();
            for slot in p.wanted.iter().chain(&p.declined).chain(&p.unanswered) {
                ensure(seen.insert(slot.id), || format!("case {case}: {} in two partitions", slot.id))?;
            }
            let all: BTreeSet<NeedId> = memo.slots().map(|s| s.id).collect();
            ensure(seen == all, || format!("case {case}: partition does not cover the memo"))?;
            ensure(memo.revision() == initial + mutations, || {
                format!("case {case}: revision {} after {mutations} mutations", memo.revision())
            })?;
            for slot in memo.slots() {
                ensure(slot.clarify == (slot.want == WantStatus::Unanswered), || {
                    format!("case {case}: clarify/want coupling broken on {}", slot.id)
                })?;
            }
        }
    }
    Ok(format!("10000 sequences, {total_ops} operations"))
}

fn reference_allow_lists() -> Result<BTreeMap<AgentRole, BTreeSet<ToolName>>, String> {
    let reference = read(reference_path())?;
    let labels = [
        (AgentRole::Inquiry, "inquiry"),
        (AgentRole::Milestone, "milestone"),
        (AgentRole::NeedsDiscovery, "discovery"),
        (AgentRole::Ranking, "ranking"),
        (AgentRole::SolutionCraft, "solution"),
    ];
    let mut out = BTreeMap::new();
    for (role, label) in labels {
        let table = reference_table(&reference, label)?;
        out.insert(role, ToolName::ALL.into_iter().filter(|t| table.contains(t.as_str())).collect());
    }
    Ok(out)
}

fn valid_args(tool: ToolName) -> serde_json::Value {
    match tool {
        ToolName::AddNeedSlot => serde_json::json!({"need": "n", "clarify": false, "user_want": true}),
        ToolName::FillNeedSlot => serde_json::json!({"need_id": "000", "need": "n", "user_want": true}),
        ToolName::WriteSolution => serde_json::json!({"solution": "s"}),
        _ => serde_json::json!({}),
    }
}

// 4. Tool-policy matrix.
async fn tool_policy() -> Outcome {
    let expected = reference_allow_lists()?;
    let mut cells = 0;
    for role in AgentRole::ALL {
        let want = &expected[&role];
        let have: BTreeSet<ToolName> = allowed_tools(role).iter().copied().collect();
        ensure(&have == want, || format!("{role}: allow-list {have:?}, expected {want:?}"))?;
        for tool in ToolName::ALL {
            cells += 1;
            let call = ToolCall {
                id: "c".into(),
                name: tool.as_str().into(),
                args: valid_args(tool),
            };
            let allowed = needcraft_core::agents::enforce_tool_policy(role, &call).is_ok();
            ensure(allowed == want.contains(&tool), || format!("{role} x {tool:?}: allowed={allowed}"))?;
        }
    }

    for role in AgentRole::ALL {
        let orch = simulated(SimulationConfig {
            always_violate: Some(role),
            ..SimulationConfig::seeded(11)
        });
        let mut s = SessionState::new("p", "p", SessionMode::Care);
        let mut result = orch.begin(&mut s, "Plan a 5-day trip to Hawaii").await.map(drop);
        if result.is_ok() && matches!(s.phase, Phase::Inquiring { .. }) {
            result = orch.handle_user_message(&mut s, UserInput::Skip).await.map(drop);
        }
        match result {
            Err(SessionError::Agent {
                source: AgentError::PolicyViolation { retries, .. },
                ..
            }) => {
                ensure(retries <= 2, || format!("{role}: {retries} retries"))?;
                let calls = s.calls_issued(role.as_str());
                ensure(calls == retries + 1, || format!("{role}: {calls} calls for {retries} retries"))?;
            }
            other => return Err(format!("{role}: expected PolicyViolation, got {other:?}")),
        }
        let executed_ok = s.tool_executions.iter().all(|(r, t)| allowed_tools(*r).contains(t));
        ensure(executed_ok, || format!("{role}: a forbidden tool executed"))?;
    }
    Ok(format!("{cells} cells match, 5/5 roles stop with PolicyViolation after 2 retries"))
}

/// Fails the call with the given index once, then passes everything through.
struct FailOnce<B> {
    inner: B,
    at: AtomicU32,
    calls: AtomicU32,
}

#[async_trait::async_trait]
impl<B: ChatBackend> ChatBackend for FailOnce<B> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == self.at.load(Ordering::SeqCst) {
            return Err(BackendError::Network("injected".into()));
        }
        self.inner.complete(request).await
    }
}

/// Runs a session until it rests in `target` with at least one wanted need.
async fn session_in(target: &'static str, seed: u64) -> Option<(Orchestrator, SessionState)> {
    for at in 0..80 {
        let backend = Arc::new(FailOnce {
            inner: SimulatedBackend::new(SimulationConfig::seeded(seed)),
            at: AtomicU32::new(at),
            calls: AtomicU32::new(0),
        });
        let orch = care(backend.clone());
        let mut s = SessionState::new("e", "e", SessionMode::Care);
        let mut events = Vec::new();
        let mut step = orch.begin(&mut s, "Plan a 5-day trip to Hawaii").await;
        for round in 0..12 {
            let wanted = s.memo.slots().any(|x| x.want == WantStatus::Wanted);
            if s.phase.name() == target && wanted && (step.is_err() || s.phase.awaits_user()) {
                backend.at.store(u32::MAX, Ordering::SeqCst);
                return Some((orch, s));
            }
            match step {
                Err(_) => break,
                Ok(e) => events.extend(e),
            }
            step = match s.phase {
                Phase::Inquiring { .. } => answer_all(&orch, &mut s, "Yes please").await,
                Phase::SolutionReady if round < 6 => {
                    orch.handle_user_message(&mut s, UserInput::message("Add a rainy-day option")).await
                }
                _ => break,
            };
        }
    }
    None
}

// 5. Manual-edit re-plan.
async fn manual_edit_replan() -> Outcome {
    let phases = [
        "milestone_decision",
        "needs_discovery",
        "ranking",
        "inquiring",
        "solution_drafting",
        "solution_ready",
    ];
    let mut cases = 0;
    for target in phases {
        for delete in [true, false] {
            let (orch, mut s) = session_in(target, 5).await.ok_or_else(|| format!("could not reach {target}"))?;
            let id = s.memo.slots().find(|x| x.want == WantStatus::Wanted).map(|x| x.id).unwrap();
            let milestones = s.milestones.len();
            let was_drafting = s.phase == Phase::SolutionDrafting;
            let edit = if delete {
                UserEdit::Delete { id }
            } else {
                UserEdit::Update {
                    id,
                    need: "The trip should be relaxed.".into(),
                }
            };
            let (_, mut events) = orch.record_manual_edit(&mut s, &edit).map_err(|e| format!("{target}: {e}"))?;
            if !s.phase.awaits_user() {
                events.extend(orch.advance(&mut s).await.map_err(|e| format!("{target}: {e}"))?);
            }
            until_ready(&orch, &mut s, &mut events).await.map_err(|e| format!("{target}: {e}"))?;
            let entered = phase_trace(&events).iter().filter(|p| **p == "solution_drafting").count();
            let written = count(&events, "solution_updated");
            ensure(written == 1 && entered == usize::from(!was_drafting), || {
                format!("{target} delete={delete}: {written} solutions, entered drafting {entered} times")
            })?;
            ensure(s.milestones.len() == milestones, || format!("{target}: new milestone after edit"))?;
            if delete {
                let cited = s.solution.as_ref().is_some_and(|x| x.cited_ids().contains(&id));
                ensure(!cited, || format!("{target}: deleted need still cited"))?;
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} edits across 6 phases, 1 drafting run and 0 milestones each"))
}

// 6. Skip path.
async fn skip_path() -> Outcome {
    let mut sessions = 0;
    for seed in 0..50u64 {
        let orch = simulated(SimulationConfig {
            noise: 0.2,
            ..SimulationConfig::seeded(seed)
        });
        let (mut s, _) = orch
            .start_session("k", "k", "Plan a 5-day trip to Hawaii", SessionMode::Care)
            .await
            .map_err(|e| format!("seed {seed}: {e}"))?;
        // Answer a few batches first on some seeds.
        for _ in 0..(seed % 3) {
            if matches!(s.phase, Phase::Inquiring { .. }) {
                answer_all(&orch, &mut s, "Yes please").await.map_err(|e| e.to_string())?;
            }
        }
        if !matches!(s.phase, Phase::Inquiring { .. }) {
            continue;
        }
        let input = match seed % 3 {
            0 => UserInput::Skip,
            1 => UserInput::message("Stop asking questions right away, show me the plan"),
            _ => UserInput::message("skip"),
        };
        let events = orch.handle_user_message(&mut s, input).await.map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(s.phase == Phase::SolutionReady, || format!("seed {seed}: ended in {}", s.phase))?;
        let posted = count(&events, "questions_posted");
        ensure(posted == 0, || format!("seed {seed}: {posted} batches after skip"))?;
        sessions += 1;
    }
    ensure(sessions >= 30, || format!("only {sessions} sessions reached a skip"))?;
    Ok(format!("{sessions} sessions, 0 batches after skip"))
}

// 7. Batch bound.
async fn batch_bound() -> Outcome {
    let expectation: Expectation =
        serde_json::from_str(&read(root().join("fixtures/hawaii.expect.json"))?).map_err(|e| e.to_string())?;
    let (mut batches, mut largest) = (0, 0);
    let check = |events: &[UiEvent], batches: &mut usize, largest: &mut usize| -> Result<(), String> {
        for e in events {
            if let UiEvent::QuestionsPosted { questions, .. } = e {
                *batches += 1;
                *largest = (*largest).max(questions.len());
                ensure(questions.len() <= MAX_BATCH, || format!("batch of {}", questions.len()))?;
            }
        }
        Ok(())
    };
    check(&expectation.events, &mut batches, &mut largest)?;

    // Random rankings through the batcher.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1_000 {
        let mut next_id = 0;
        let groups: Vec<QuestionGroup> = (0..rng.random_range(1..6))
            .map(|g| QuestionGroup {
                topic: format!("T{g}"),
                questions: (0..rng.random_range(1..13))
                    .map(|_| {
                        next_id += 1;
                        GroupQuestion {
                            need_id: NeedId::new(next_id),
                            question: format!("Q{next_id}?"),
                        }
                    })
                    .collect(),
            })
            .collect();
        let mut answered = BTreeSet::new();
        let mut seen = 0;
        while let Some(batch) = next_batch(&groups, &answered) {
            batches += 1;
            largest = largest.max(batch.questions.len());
            ensure(batch.questions.len() <= MAX_BATCH && !batch.questions.is_empty(), || {
                format!("batch of {}", batch.questions.len())
            })?;
            seen += batch.questions.len();
            answered.extend(batch.questions.iter().map(|q| q.need_id));
        }
        ensure(seen == next_id as usize, || format!("{seen} of {next_id} questions batched"))?;
    }

    // End-to-end sessions with large random groups.
    for seed in 0..100u64 {
        let orch = simulated(SimulationConfig {
            questions_per_milestone: (4, 14),
            max_group: 12,
            milestones: 1 + (seed % 2) as usize,
            ..SimulationConfig::seeded(seed)
        });
        let (mut s, mut events) = orch
            .start_session("b", "b", "Plan a 5-day trip to Hawaii", SessionMode::Care)
            .await
            .map_err(|e| format!("seed {seed}: {e}"))?;
        until_ready(&orch, &mut s, &mut events).await?;
        check(&events, &mut batches, &mut largest)?;
    }
    Ok(format!("{batches} batches, largest {largest}"))
}

// 8. Baseline isolation.
async fn baseline_isolation() -> Outcome {
    for seed in 0..10u64 {
        let orch = simulated(SimulationConfig::seeded(seed));
        let (s, events) = orch
            .start_session("base", "base", "Plan a 5-day trip to Hawaii", SessionMode::Baseline)
            .await
            .map_err(|e| e.to_string())?;
        let solutions = count(&events, "solution_updated");
        let needs_events = count(&events, "needs_updated") + count(&events, "questions_posted");
        ensure(solutions == 1 && s.solution.is_some(), || format!("{solutions} solutions"))?;
        ensure(s.tool_executions.is_empty(), || format!("{} tool executions", s.tool_executions.len()))?;
        ensure(s.milestones.is_empty(), || format!("{} milestones", s.milestones.len()))?;
        ensure(needs_events == 0 && s.memo.is_empty(), || format!("{needs_events} needs events"))?;
        let agents = s.call_counters.keys().filter(|k| AgentRole::parse(k).is_some()).count();
        ensure(agents == 0, || "a care agent was called".into())?;
    }
    Ok("10 sessions: 1 solution, 0 tools, 0 milestones, 0 needs events".into())
}

/// Blocks forever on the chosen call, as a crashed process would.
struct Gate {
    inner: SimulatedBackend,
    at: u32,
    calls: AtomicU32,
    hit: tokio::sync::Notify,
}

#[async_trait::async_trait]
impl ChatBackend for Gate {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == self.at {
            self.hit.notify_one();
            std::future::pending::<()>().await;
        }
        self.inner.complete(request).await
    }
}

// 9. Crash recovery.
async fn crash_recovery() -> Outcome {
    let mut mid_turn = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let gate = Arc::new(Gate {
            inner: SimulatedBackend::new(SimulationConfig {
                noise: 0.1,
                ..SimulationConfig::seeded(seed)
            }),
            at: rng.random_range(1..45),
            calls: AtomicU32::new(0),
            hit: tokio::sync::Notify::new(),
        });
        let store: Arc<dyn SessionStore> = Arc::new(FileStore::open(dir.path()).map_err(|e| e.to_string())?);
        let config = ServiceConfig {
            snapshot_every: [1, 5, 64][rng.random_range(0..3)],
            ..ServiceConfig::default()
        };
        let m = SessionManager::new(Orchestrator::new(&PromptPack::builtin(), gate.clone()), store, config);
        let mode = if rng.random_bool(0.2) { SessionMode::Baseline } else { SessionMode::Care };
        let id = m
            .create_session("Plan a 5-day trip to Hawaii", mode, None)
            .map_err(|e| e.to_string())?
            .id;

        let mut blocked = false;
        for _ in 0..20 {
            let settled: Pin<Box<dyn Future<Output = _> + Send>> = Box::pin(m.settle(&id));
            tokio::select! {
                _ = gate.hit.notified() => { blocked = true; break; }
                r = settled => r.map_err(|e| e.to_string())?,
            }
            let s = m.state(&id).map_err(|e| e.to_string())?;
            let wanted = s.memo.slots().find(|x| x.want == WantStatus::Wanted).map(|x| x.id);
            match (s.phase, rng.random_range(0..6)) {
                (Phase::Inquiring { .. }, 0) => m.post_message(&id, UserInput::Skip).map(drop),
                (Phase::Inquiring { .. } | Phase::SolutionReady, 1) if wanted.is_some() => {
                    let edit = UserEdit::Delete { id: wanted.unwrap() };
                    m.edit_need(&id, edit).await.map(drop)
                }
                (Phase::Inquiring { .. }, _) => {
                    let n = s.posted.as_ref().map_or(1, |b| b.questions.len());
                    m.post_message(&id, UserInput::message(numbered_answers(n, "Yes please"))).map(drop)
                }
                (Phase::SolutionReady, _) => m.post_message(&id, UserInput::message("Add a rainy-day option")).map(drop),
                _ => break,
            }
            .map_err(|e| format!("seed {seed}: {e}"))?;
        }
        m.kill().await;
        let before = m.panels(&id).map_err(|e| e.to_string())?;
        let history = m.events_since(&id, 0).map_err(|e| e.to_string())?;
        drop(m);

        let store: Arc<dyn SessionStore> = Arc::new(FileStore::open(dir.path()).map_err(|e| e.to_string())?);
        let m = SessionManager::new(simulated(SimulationConfig::seeded(seed)), store, ServiceConfig::default());
        m.recover().map_err(|e| format!("seed {seed}: {e}"))?;
        let after = m.panels(&id).map_err(|e| e.to_string())?;
        let (a, b) = (before.panels.to_canonical_json(), after.panels.to_canonical_json());
        ensure(a == b, || format!("seed {seed}: snapshots differ\n  before {a}\n  after  {b}"))?;
        ensure(m.events_since(&id, 0).map_err(|e| e.to_string())? == history, || {
            format!("seed {seed}: event history differs")
        })?;
        mid_turn += usize::from(blocked);
    }
    Ok(format!("20 sessions byte-identical, {mid_turn} killed mid-turn"))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("runtime");
    let results: Vec<(&str, Outcome)> = rt.block_on(async {
        vec![
            ("hawaii-golden", hawaii_golden().await),
            ("protocol-goldens", protocol_goldens()),
            ("memo-properties", memo_properties()),
            ("tool-policy-matrix", tool_policy().await),
            ("manual-edit-replan", manual_edit_replan().await),
            ("skip-path", skip_path().await),
            ("batch-bound", batch_bound().await),
            ("baseline-isolation", baseline_isolation().await),
            ("crash-recovery", crash_recovery().await),
        ]
    });
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
