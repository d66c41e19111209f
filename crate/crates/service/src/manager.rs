use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use needcraft_core::needs_memo::{EditReceipt, UserEdit};
use needcraft_core::orchestrator::{
    Orchestrator, PanelSnapshot, Phase, SessionChange, SessionMode, SessionObserver, SessionState, UiEvent,
    UserInput,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::error::ServiceError;
use crate::store::{LogRecord, SeqEvent, SessionHeader, SessionStore, Snapshot};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    /// A snapshot is written every this many changes.
    pub snapshot_every: u64,
    /// Live events buffered per subscriber before it falls back to history.
    pub broadcast_capacity: usize,
    /// Continue sessions that were interrupted mid-turn when recovering.
    pub resume_interrupted: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            snapshot_every: 64,
            broadcast_capacity: 1024,
            resume_interrupted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub tag: String,
    pub mode: SessionMode,
    pub created_at: String,
}

impl From<&SessionHeader> for SessionHandle {
    fn from(h: &SessionHeader) -> Self {
        Self {
            id: h.id.clone(),
            tag: h.tag.clone(),
            mode: h.mode,
            created_at: h.created_at.clone(),
        }
    }
}

/// Panels plus the stream position they reflect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelsAt {
    pub event_seq: u64,
    pub busy: bool,
    pub panels: PanelSnapshot,
}

enum Command {
    Start,
    Input(UserInput),
    Edit(UserEdit, oneshot::Sender<Result<EditReceipt, ServiceError>>),
    Advance,
}

/// Mirror of the actor's state, updated change by change as the engine
/// commits. Readers never wait for an agent turn.
struct Shadow {
    state: SessionState,
    changes: u64,
    events: Vec<SeqEvent>,
}

struct Session {
    header: SessionHeader,
    shadow: Mutex<Shadow>,
    tx: broadcast::Sender<SeqEvent>,
    commands: mpsc::UnboundedSender<Command>,
    accepted: AtomicU64,
    submitted: AtomicU64,
    done: watch::Sender<u64>,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl Session {
    fn submit(&self, command: Command) -> Result<(), ServiceError> {
        self.submitted.fetch_add(1, Ordering::SeqCst);
        self.commands.send(command).map_err(|_| {
            self.submitted.fetch_sub(1, Ordering::SeqCst);
            ServiceError::ShuttingDown
        })
    }

    fn busy(&self) -> bool {
        *self.done.borrow() < self.submitted.load(Ordering::SeqCst)
    }
}

struct Registry {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    store: Arc<dyn SessionStore>,
    config: ServiceConfig,
}

impl Registry {
    fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("registry lock").get(id).cloned()
    }

    fn record_event(&self, session: &Session, event: &UiEvent) {
        let mut shadow = session.shadow.lock().expect("shadow lock");
        let item = SeqEvent {
            seq: shadow.events.len() as u64 + 1,
            event: event.clone(),
        };
        if let Err(e) = self.store.append(&session.header.id, &[LogRecord::Event(item.clone())]) {
            tracing::error!(session = %session.header.id, error = %e, "event not persisted");
        }
        shadow.events.push(item.clone());
        let _ = session.tx.send(item);
    }
}

impl SessionObserver for Registry {
    fn on_change(&self, session_id: &str, change: &SessionChange) {
        let Some(session) = self.get(session_id) else { return };
        let mut shadow = session.shadow.lock().expect("shadow lock");
        let n = shadow.changes + 1;
        if let Err(e) = self.store.append(
            session_id,
            &[LogRecord::Change {
                n,
                change: change.clone(),
            }],
        ) {
            tracing::error!(session = session_id, error = %e, "change not persisted");
        }
        if let Err(e) = shadow.state.apply(change) {
            tracing::error!(session = session_id, error = %e, "shadow state diverged");
        }
        shadow.changes = n;
        if self.config.snapshot_every > 0 && n % self.config.snapshot_every == 0 {
            let snapshot = Snapshot {
                changes: n,
                state: shadow.state.clone(),
            };
            if let Err(e) = self.store.write_snapshot(session_id, &snapshot) {
                tracing::warn!(session = session_id, error = %e, "snapshot not written");
            }
        }
    }

    fn on_event(&self, session_id: &str, event: &UiEvent) {
        if let Some(session) = self.get(session_id) {
            self.record_event(&session, event);
        }
    }
}

struct Inner {
    registry: Arc<Registry>,
    orch: Arc<Orchestrator>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        for session in self.registry.sessions.read().expect("registry lock").values() {
            if let Some(task) = session.task.lock().expect("task lock").take() {
                task.abort();
            }
        }
    }
}

/// Owns every live session. Each session runs on its own task and handles
/// one command at a time, in submission order.
#[derive(Clone)]
pub struct SessionManager {
    inner: Arc<Inner>,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

async fn run_session(orch: Arc<Orchestrator>, registry: Arc<Registry>, session: Arc<Session>, mut state: SessionState, mut rx: mpsc::UnboundedReceiver<Command>) {
    while let Some(command) = rx.recv().await {
        let outcome = match command {
            Command::Start => orch.begin(&mut state, &session.header.query).await.map(drop),
            Command::Input(input) => orch.handle_user_message(&mut state, input).await.map(drop),
            Command::Edit(edit, reply) => match orch.record_manual_edit(&mut state, &edit) {
                Ok((receipt, _)) => {
                    let _ = reply.send(Ok(receipt));
                    if state.phase.awaits_user() {
                        Ok(())
                    } else {
                        orch.advance(&mut state).await.map(drop)
                    }
                }
                Err(e) => {
                    let _ = reply.send(Err(e.into()));
                    Ok(())
                }
            },
            Command::Advance if state.phase.awaits_user() => Ok(()),
            Command::Advance => orch.advance(&mut state).await.map(drop),
        };
        if let Err(e) = outcome {
            // Engine operations report their own failures; this catches
            // requests that were accepted but no longer fit the phase.
            if matches!(e.code(), "WrongPhase" | "EmptyMessage" | "EmptyQuery" | "WrongMode") {
                registry.record_event(
                    &session,
                    &UiEvent::TurnFailed {
                        code: e.code().into(),
                        message: e.to_string(),
                    },
                );
            }
            tracing::warn!(session = %session.header.id, error = %e, "session command failed");
        }
        session.done.send_modify(|d| *d += 1);
    }
}

impl SessionManager {
    pub fn new(orch: Orchestrator, store: Arc<dyn SessionStore>, config: ServiceConfig) -> Self {
        let registry = Arc::new(Registry {
            sessions: RwLock::new(HashMap::new()),
            store,
            config,
        });
        let orch = Arc::new(orch.with_observer(registry.clone()));
        Self {
            inner: Arc::new(Inner { registry, orch }),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.inner
            .registry
            .get(id)
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    fn spawn(&self, header: SessionHeader, state: SessionState, changes: u64, events: Vec<SeqEvent>) -> Arc<Session> {
        let (commands, rx) = mpsc::unbounded_channel();
        let (tx, _) = broadcast::channel(self.inner.registry.config.broadcast_capacity.max(1));
        let session = Arc::new(Session {
            header: header.clone(),
            shadow: Mutex::new(Shadow {
                state: state.clone(),
                changes,
                events,
            }),
            tx,
            commands,
            accepted: AtomicU64::new(0),
            submitted: AtomicU64::new(0),
            done: watch::Sender::new(0),
            task: Mutex::new(None),
        });
        self.inner
            .registry
            .sessions
            .write()
            .expect("registry lock")
            .insert(header.id.clone(), session.clone());
        let task = tokio::spawn(run_session(
            self.inner.orch.clone(),
            self.inner.registry.clone(),
            session.clone(),
            state,
            rx,
        ));
        *session.task.lock().expect("task lock") = Some(task);
        session
    }

    /// Creates and persists a session, then starts it in the background.
    pub fn create_session(&self, query: &str, mode: SessionMode, tag: Option<String>) -> Result<SessionHandle, ServiceError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(ServiceError::EmptyQuery);
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let header = SessionHeader {
            tag: tag.filter(|t| !t.trim().is_empty()).unwrap_or_else(|| id.clone()),
            id: id.clone(),
            mode,
            query: query.to_string(),
            created_at: now_rfc3339(),
        };
        self.inner.registry.store.create(&header)?;
        let state = SessionState::new(id, header.tag.clone(), mode);
        let session = self.spawn(header.clone(), state, 0, Vec::new());
        session.submit(Command::Start)?;
        Ok(SessionHandle::from(&header))
    }

    /// Queues a user message. Returns its per-session sequence number.
    pub fn post_message(&self, id: &str, input: UserInput) -> Result<u64, ServiceError> {
        let session = self.session(id)?;
        if let UserInput::Message { text } = &input {
            if text.trim().is_empty() {
                return Err(ServiceError::EmptyMessage);
            }
        }
        let phase = session.shadow.lock().expect("shadow lock").state.phase;
        let fits = match (&input, phase) {
            (_, Phase::Inquiring { .. }) => session.header.mode == SessionMode::Care,
            (UserInput::Message { .. }, Phase::SolutionReady) => true,
            _ => false,
        };
        if !fits {
            return Err(ServiceError::WrongPhase(phase));
        }
        session.submit(Command::Input(input))?;
        Ok(session.accepted.fetch_add(1, Ordering::SeqCst) + 1)
    }

    /// Re-runs the agent step that failed last, if the session is stuck.
    pub fn retry(&self, id: &str) -> Result<u64, ServiceError> {
        let session = self.session(id)?;
        let phase = session.shadow.lock().expect("shadow lock").state.phase;
        if phase.awaits_user() {
            return Err(ServiceError::WrongPhase(phase));
        }
        session.submit(Command::Advance)?;
        Ok(session.accepted.fetch_add(1, Ordering::SeqCst) + 1)
    }

    /// Applies a needs-panel edit in queue order and returns once the memo
    /// has changed. The re-plan continues in the background.
    pub async fn edit_need(&self, id: &str, edit: UserEdit) -> Result<EditReceipt, ServiceError> {
        let session = self.session(id)?;
        let (reply, rx) = oneshot::channel();
        session.submit(Command::Edit(edit, reply))?;
        rx.await.map_err(|_| ServiceError::ShuttingDown)?
    }

    pub fn panels(&self, id: &str) -> Result<PanelsAt, ServiceError> {
        let session = self.session(id)?;
        let busy = session.busy();
        let shadow = session.shadow.lock().expect("shadow lock");
        Ok(PanelsAt {
            event_seq: shadow.events.len() as u64,
            busy,
            panels: PanelSnapshot::capture(&shadow.state),
        })
    }

    pub fn state(&self, id: &str) -> Result<SessionState, ServiceError> {
        Ok(self.session(id)?.shadow.lock().expect("shadow lock").state.clone())
    }

    pub fn handle(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        Ok(SessionHandle::from(&self.session(id)?.header))
    }

    pub fn list(&self) -> Vec<SessionHandle> {
        let mut handles: Vec<SessionHandle> = self
            .inner
            .registry
            .sessions
            .read()
            .expect("registry lock")
            .values()
            .map(|s| SessionHandle::from(&s.header))
            .collect();
        handles.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        handles
    }

    pub fn events_since(&self, id: &str, since: u64) -> Result<Vec<SeqEvent>, ServiceError> {
        let session = self.session(id)?;
        let shadow = session.shadow.lock().expect("shadow lock");
        Ok(shadow.events.iter().skip(since as usize).cloned().collect())
    }

    /// History after `since` plus a live feed. Together they cover every
    /// event exactly once.
    pub fn subscribe(&self, id: &str, since: u64) -> Result<(Vec<SeqEvent>, broadcast::Receiver<SeqEvent>), ServiceError> {
        let session = self.session(id)?;
        let shadow = session.shadow.lock().expect("shadow lock");
        let rx = session.tx.subscribe();
        Ok((shadow.events.iter().skip(since as usize).cloned().collect(), rx))
    }

    /// Waits until every command submitted so far has been processed.
    pub async fn settle(&self, id: &str) -> Result<(), ServiceError> {
        let session = self.session(id)?;
        let target = session.submitted.load(Ordering::SeqCst);
        let mut rx = session.done.subscribe();
        rx.wait_for(|d| *d >= target)
            .await
            .map_err(|_| ServiceError::ShuttingDown)?;
        Ok(())
    }

    /// Loads every stored session not already live. Returns their ids.
    pub fn recover(&self) -> Result<Vec<String>, ServiceError> {
        let store = &self.inner.registry.store;
        let mut recovered = Vec::new();
        for id in store.list()? {
            if self.inner.registry.get(&id).is_some() {
                continue;
            }
            let stored = store.load(&id)?;
            let r = stored
                .recover()
                .map_err(|source| ServiceError::Recover { id: id.clone(), source })?;
            let fresh = r.state.phase == Phase::AwaitUserQuery && r.state.transcript.is_empty();
            let interrupted = !r.state.phase.awaits_user();
            let session = self.spawn(r.header, r.state, r.changes, r.events);
            if self.inner.registry.config.resume_interrupted {
                if fresh {
                    session.submit(Command::Start)?;
                } else if interrupted {
                    session.submit(Command::Advance)?;
                }
            }
            recovered.push(id);
        }
        Ok(recovered)
    }

    /// Stops every session task at its next await point, as a crash would.
    /// Stops every session task where it stands, as a crash would, and
    /// waits until none of them can touch the store again.
    pub async fn kill(&self) {
        let tasks: Vec<JoinHandle<()>> = self
            .inner
            .registry
            .sessions
            .read()
            .expect("registry lock")
            .values()
            .filter_map(|session| session.task.lock().expect("task lock").take())
            .collect();
        for task in tasks {
            task.abort();
            let _ = task.await;
        }
    }
}
