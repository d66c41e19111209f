use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::digest::request_digest;
use super::types::{BackendError, CallKey, ChatBackend, ChatRequest, ChatResponse};

/// One recorded backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub key: CallKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_digest: Option<String>,
    pub response: ChatResponse,
}

pub fn read_fixtures(path: &Path) -> Result<Vec<Fixture>, BackendError> {
    let text = fs::read_to_string(path)
        .map_err(|e| BackendError::Storage(format!("{}: {e}", path.display())))?;
    parse_fixtures(&text)
}

pub fn parse_fixtures(text: &str) -> Result<Vec<Fixture>, BackendError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| BackendError::Storage(format!("fixture line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn write_fixtures(path: &Path, fixtures: &[Fixture]) -> Result<(), BackendError> {
    let storage = |e: std::io::Error| BackendError::Storage(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(storage)?;
    }
    let mut out = Vec::new();
    for fixture in fixtures {
        serde_json::to_writer(&mut out, fixture)
            .map_err(|e| BackendError::Storage(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(storage)?;
    file.write_all(&out).map_err(storage)
}

/// Replays recorded responses by call key. Never touches the network.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    fixtures: HashMap<CallKey, Fixture>,
    strict: bool,
}

impl ScriptedBackend {
    pub fn new(fixtures: Vec<Fixture>) -> Result<Self, BackendError> {
        let mut map = HashMap::with_capacity(fixtures.len());
        for fixture in fixtures {
            let key = fixture.key.clone();
            if map.insert(key.clone(), fixture).is_some() {
                return Err(BackendError::Storage(format!("duplicate fixture key {key}")));
            }
        }
        Ok(Self {
            fixtures: map,
            strict: false,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Self::new(read_fixtures(path)?)
    }

    /// In strict mode a fixture's recorded digest must match the request.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    fn nearest(&self, key: &CallKey) -> Vec<CallKey> {
        let mut keys: Vec<&CallKey> = self.fixtures.keys().collect();
        keys.sort_by_key(|k| {
            (
                k.session != key.session,
                k.role != key.role,
                k.turn.abs_diff(key.turn),
                (*k).clone(),
            )
        });
        keys.into_iter().take(3).cloned().collect()
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let Some(fixture) = self.fixtures.get(&request.key) else {
            return Err(BackendError::FixtureMiss {
                key: request.key.clone(),
                nearest: self.nearest(&request.key),
            });
        };
        if self.strict {
            if let Some(expected) = &fixture.request_digest {
                let actual = request_digest(request);
                if &actual != expected {
                    return Err(BackendError::DigestMismatch {
                        key: request.key.clone(),
                        expected: expected.clone(),
                        actual,
                    });
                }
            }
        }
        Ok(fixture.response.clone())
    }
}

/// Pass-through wrapper that records every call as a [`Fixture`].
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<Vec<Fixture>>,
    path: Option<PathBuf>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
            path: None,
        }
    }

    /// Fixtures are written to `path` on [`flush`](Self::flush) and on drop.
    pub fn with_path(inner: B, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
            path: Some(path.into()),
        }
    }

    pub fn fixtures(&self) -> Vec<Fixture> {
        self.recorded.lock().expect("recorder lock").clone()
    }

    pub fn flush(&self) -> Result<(), BackendError> {
        match &self.path {
            Some(path) => write_fixtures(path, &self.fixtures()),
            None => Ok(()),
        }
    }
}

impl<B> Drop for RecordingBackend<B> {
    fn drop(&mut self) {
        if let Some(path) = &self.path {
            let fixtures = self.recorded.get_mut().map(|f| f.clone()).unwrap_or_default();
            if let Err(e) = write_fixtures(path, &fixtures) {
                tracing::warn!(error = %e, "failed to flush recorded fixtures");
            }
        }
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request).await?;
        self.recorded.lock().expect("recorder lock").push(Fixture {
            key: request.key.clone(),
            request_digest: Some(request_digest(request)),
            response: response.clone(),
        });
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_backend::types::ChatMessage;

    fn request(role: &str, turn: u32, text: &str) -> ChatRequest {
        ChatRequest {
            key: CallKey::new("hawaii", role, turn),
            model: String::new(),
            messages: vec![ChatMessage::system("sys"), ChatMessage::user(text)],
            tool_schemas: Vec::new(),
            temperature: 0.0,
            max_tokens: 64,
        }
    }

    fn fixture(role: &str, turn: u32, reply: &str) -> Fixture {
        Fixture {
            key: CallKey::new("hawaii", role, turn),
            request_digest: None,
            response: ChatResponse::text(reply),
        }
    }

    #[tokio::test]
    async fn lookup_by_key() {
        let backend = ScriptedBackend::new(vec![fixture("milestone", 0, "x [MilestoneEnd]")]).unwrap();
        let out = backend.complete(&request("milestone", 0, "q")).await.unwrap();
        assert_eq!(out, ChatResponse::text("x [MilestoneEnd]"));
    }

    #[tokio::test]
    async fn miss_reports_nearest_keys() {
        let backend = ScriptedBackend::new(vec![
            fixture("milestone", 0, "a"),
            fixture("milestone", 1, "b"),
            fixture("ranking", 0, "c"),
        ])
        .unwrap();
        let err = backend.complete(&request("milestone", 3, "q")).await.unwrap_err();
        match err {
            BackendError::FixtureMiss { key, nearest } => {
                assert_eq!(key, CallKey::new("hawaii", "milestone", 3));
                assert_eq!(nearest[0], CallKey::new("hawaii", "milestone", 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(ScriptedBackend::new(vec![fixture("a", 0, "x"), fixture("a", 0, "y")]).is_err());
    }

    #[tokio::test]
    async fn strict_mode_checks_digest() {
        let req = request("milestone", 0, "q");
        let mut f = fixture("milestone", 0, "ok");
        f.request_digest = Some(request_digest(&req));
        let backend = ScriptedBackend::new(vec![f]).unwrap().strict(true);
        assert!(backend.complete(&req).await.is_ok());
        let drifted = request("milestone", 0, "different");
        assert!(matches!(
            backend.complete(&drifted).await,
            Err(BackendError::DigestMismatch { .. })
        ));
    }

    #[tokio::test]
    async fn recording_a_replay_is_idempotent() {
        let original = vec![fixture("milestone", 0, "a"), fixture("ranking", 0, "b")];
        let recorder = RecordingBackend::new(ScriptedBackend::new(original.clone()).unwrap());
        let reqs = [request("milestone", 0, "q"), request("ranking", 0, "r")];
        for r in &reqs {
            recorder.complete(r).await.unwrap();
        }
        let recorded = recorder.fixtures();
        assert_eq!(recorded.len(), reqs.len());
        let again = RecordingBackend::new(ScriptedBackend::new(recorded.clone()).unwrap().strict(true));
        for r in &reqs {
            again.complete(r).await.unwrap();
        }
        assert_eq!(again.fixtures(), recorded);
        for (a, b) in recorded.iter().zip(&original) {
            assert_eq!(a.response, b.response);
        }
    }

    #[tokio::test]
    async fn file_round_trip_and_flush_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.jsonl");
        {
            let recorder = RecordingBackend::with_path(
                ScriptedBackend::new(vec![fixture("milestone", 0, "a")]).unwrap(),
                &path,
            );
            recorder.complete(&request("milestone", 0, "q")).await.unwrap();
        }
        let loaded = read_fixtures(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].response, ChatResponse::text("a"));
    }
}
