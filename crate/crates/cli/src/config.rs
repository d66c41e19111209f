use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use needcraft_core::agents::{PromptPack, PromptPackError};
use needcraft_core::llm_backend::{
    BackendError, ChatBackend, LiveBackend, LiveConfig, ScriptedBackend, SimulatedBackend, SimulationConfig,
};
use needcraft_core::orchestrator::SessionMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "NEEDCRAFT_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("scripted backend requires a fixture path (--fixtures or {ENV_PREFIX}FIXTURES)")]
    MissingFixtures,
    #[error("fixture file {0} does not exist")]
    FixtureNotFound(PathBuf),
    #[error("live backend requires the credential variable {0} to be set")]
    MissingCredential(String),
    #[error(transparent)]
    Prompts(#[from] PromptPackError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Live,
    Simulated,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(BackendKind::Scripted),
            "live" => Ok(BackendKind::Live),
            "simulated" => Ok(BackendKind::Simulated),
            other => Err(format!("unknown backend {other:?}, expected scripted, live or simulated")),
        }
    }
}

fn parse_mode(s: &str) -> Result<SessionMode, String> {
    match s {
        "care" => Ok(SessionMode::Care),
        "baseline" => Ok(SessionMode::Baseline),
        other => Err(format!("unknown mode {other:?}, expected care or baseline")),
    }
}

/// One configuration layer. Unset fields defer to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layer {
    pub backend: Option<BackendKind>,
    pub fixtures: Option<PathBuf>,
    pub seed: Option<u64>,
    pub prompts: Option<PathBuf>,
    pub storage: Option<PathBuf>,
    pub mode: Option<SessionMode>,
    pub listen: Option<SocketAddr>,
    pub model: Option<String>,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub max_in_flight: Option<usize>,
}

impl Layer {
    /// Fields set in `self` win over `below`.
    pub fn over(self, below: Layer) -> Layer {
        Layer {
            backend: self.backend.or(below.backend),
            fixtures: self.fixtures.or(below.fixtures),
            seed: self.seed.or(below.seed),
            prompts: self.prompts.or(below.prompts),
            storage: self.storage.or(below.storage),
            mode: self.mode.or(below.mode),
            listen: self.listen.or(below.listen),
            model: self.model.or(below.model),
            base_url: self.base_url.or(below.base_url),
            api_key_env: self.api_key_env.or(below.api_key_env),
            timeout_secs: self.timeout_secs.or(below.timeout_secs),
            max_retries: self.max_retries.or(below.max_retries),
            max_in_flight: self.max_in_flight.or(below.max_in_flight),
        }
    }

    pub fn from_file(path: &Path) -> Result<Layer, ConfigError> {
        let err = |message: String| ConfigError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut layer: Layer = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut layer.fixtures, &mut layer.prompts, &mut layer.storage].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(layer)
    }

    /// Reads `NEEDCRAFT_*` variables through `var`.
    pub fn from_env(var: impl Fn(&str) -> Option<String>) -> Result<Layer, ConfigError> {
        let get = |key: &str| var(&format!("{ENV_PREFIX}{key}")).filter(|v| !v.is_empty());
        fn num<T: std::str::FromStr>(key: &'static str, v: Option<String>) -> Result<Option<T>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Invalid {
                    key,
                    message: e.to_string(),
                })
            })
            .transpose()
        }
        Ok(Layer {
            backend: get("BACKEND")
                .map(|v| v.parse().map_err(|message| ConfigError::Invalid { key: "NEEDCRAFT_BACKEND", message }))
                .transpose()?,
            fixtures: get("FIXTURES").map(PathBuf::from),
            seed: num("NEEDCRAFT_SEED", get("SEED"))?,
            prompts: get("PROMPTS").map(PathBuf::from),
            storage: get("STORAGE").map(PathBuf::from),
            mode: get("MODE")
                .map(|v| parse_mode(&v).map_err(|message| ConfigError::Invalid { key: "NEEDCRAFT_MODE", message }))
                .transpose()?,
            listen: num("NEEDCRAFT_LISTEN", get("LISTEN"))?,
            model: get("MODEL"),
            base_url: get("BASE_URL"),
            api_key_env: get("API_KEY_ENV"),
            timeout_secs: num("NEEDCRAFT_TIMEOUT_SECS", get("TIMEOUT_SECS"))?,
            max_retries: num("NEEDCRAFT_MAX_RETRIES", get("MAX_RETRIES"))?,
            max_in_flight: num("NEEDCRAFT_MAX_IN_FLIGHT", get("MAX_IN_FLIGHT"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub backend: BackendKind,
    pub fixtures: Option<PathBuf>,
    pub seed: u64,
    pub prompts: Option<PathBuf>,
    pub storage: PathBuf,
    pub mode: SessionMode,
    pub listen: SocketAddr,
    pub live: LiveConfig,
}

impl CliConfig {
    /// Flags, then environment, then file, then defaults.
    pub fn resolve(flags: Layer, env: Layer, file: Option<Layer>) -> CliConfig {
        let l = flags.over(env).over(file.unwrap_or_default());
        let d = LiveConfig::default();
        CliConfig {
            backend: l.backend.unwrap_or(BackendKind::Scripted),
            fixtures: l.fixtures,
            seed: l.seed.unwrap_or(0),
            prompts: l.prompts,
            storage: l.storage.unwrap_or_else(|| PathBuf::from("needcraft-data")),
            mode: l.mode.unwrap_or(SessionMode::Care),
            listen: l.listen.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 8080))),
            live: LiveConfig {
                base_url: l.base_url.unwrap_or(d.base_url),
                model: l.model.unwrap_or(d.model),
                api_key_env: l.api_key_env.unwrap_or(d.api_key_env),
                timeout_secs: l.timeout_secs.unwrap_or(d.timeout_secs),
                max_retries: l.max_retries.unwrap_or(d.max_retries),
                max_in_flight: l.max_in_flight.unwrap_or(d.max_in_flight),
                retry_backoff_ms: d.retry_backoff_ms,
            },
        }
    }

    pub fn prompt_pack(&self) -> Result<PromptPack, ConfigError> {
        match &self.prompts {
            Some(dir) => Ok(PromptPack::load_dir(dir)?),
            None => Ok(PromptPack::builtin()),
        }
    }

    /// Checks the backend invariants without building anything.
    pub fn validate(&self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        match self.backend {
            BackendKind::Scripted => {
                let path = self.fixtures.as_ref().ok_or(ConfigError::MissingFixtures)?;
                if !path.is_file() {
                    return Err(ConfigError::FixtureNotFound(path.clone()));
                }
            }
            BackendKind::Live => {
                if var(&self.live.api_key_env).is_none_or(|v| v.trim().is_empty()) {
                    return Err(ConfigError::MissingCredential(self.live.api_key_env.clone()));
                }
            }
            BackendKind::Simulated => {}
        }
        self.prompt_pack().map(drop)
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        Ok(match self.backend {
            BackendKind::Scripted => {
                let path = self.fixtures.as_deref().unwrap_or(Path::new(""));
                Arc::new(ScriptedBackend::from_file(path)?.strict(true))
            }
            BackendKind::Live => Arc::new(LiveBackend::new(self.live.clone())?),
            BackendKind::Simulated => Arc::new(SimulatedBackend::new(SimulationConfig::seeded(self.seed))),
        })
    }
}
