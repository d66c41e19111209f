//! Operator entry points: `serve`, `chat`, `replay`, `record`, `export`.

pub mod chat;
pub mod config;
pub mod export;
pub mod replay;

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use needcraft_core::llm_backend::BackendError;
use needcraft_core::orchestrator::{Orchestrator, Scenario, SessionError, SessionMode};
use needcraft_service::{FileStore, ServiceConfig, ServiceError, SessionManager};
use thiserror::Error;

use config::{BackendKind, CliConfig, ConfigError, Layer};
use export::ExportFormat;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

/// Config file read when `--config` and `NEEDCRAFT_CONFIG` are both absent.
pub const DEFAULT_CONFIG_FILE: &str = "needcraft.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot listen on {addr}: {message}")]
    Bind { addr: SocketAddr, message: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Bind { .. } => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Session(SessionError::Backend(_) | SessionError::Agent { .. }) => EXIT_BACKEND,
            _ => EXIT_MISMATCH,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "needcraft", version, about = "Needs-aware multi-agent planning assistant")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Cmd,
}

/// Settings shared by every command. Each overrides the matching
/// `NEEDCRAFT_*` variable and config file key.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Config file (TOML). Defaults to ./needcraft.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// scripted, live or simulated.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Fixture file for the scripted backend.
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    /// Seed for the simulated backend.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Prompt pack directory. The built-in pack is used when unset.
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
    /// Session storage directory.
    #[arg(long, global = true)]
    pub storage: Option<PathBuf>,
    /// care or baseline.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<SessionMode>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
}

fn parse_mode(s: &str) -> Result<SessionMode, String> {
    match s {
        "care" => Ok(SessionMode::Care),
        "baseline" => Ok(SessionMode::Baseline),
        other => Err(format!("unknown mode {other:?}")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Chat in the terminal.
    Chat {
        /// Session id; also the fixture key namespace for the scripted backend.
        #[arg(long, default_value = "chat")]
        session: String,
        #[arg(required = true, num_args = 1..)]
        query: Vec<String>,
    },
    /// Replay recorded fixtures against an expectation file.
    Replay {
        expectation: PathBuf,
        /// Overwrite the expectation with the replayed outcome.
        #[arg(long)]
        bless: bool,
    },
    /// Run a scenario on the configured backend and record fixtures plus an expectation.
    Record {
        scenario: PathBuf,
        #[arg(long)]
        out_fixtures: PathBuf,
        #[arg(long)]
        out_expect: PathBuf,
    },
    /// Print a stored session.
    Export {
        session: String,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ExportFormat,
    },
    /// Write the built-in prompt pack to a directory for editing.
    Prompts { dir: PathBuf },
}

impl GlobalArgs {
    fn layer(&self) -> Layer {
        Layer {
            backend: self.backend,
            fixtures: self.fixtures.clone(),
            seed: self.seed,
            prompts: self.prompts.clone(),
            storage: self.storage.clone(),
            mode: self.mode,
            model: self.model.clone(),
            base_url: self.base_url.clone(),
            ..Layer::default()
        }
    }
}

/// Resolves the full configuration for `global`, reading variables through `var`.
pub fn load_config(
    global: &GlobalArgs,
    extra: Layer,
    var: impl Fn(&str) -> Option<String>,
) -> Result<CliConfig, ConfigError> {
    let file = match global.config.clone().or_else(|| var("NEEDCRAFT_CONFIG").map(PathBuf::from)) {
        Some(path) => Some(Layer::from_file(&path)?),
        None if Path::new(DEFAULT_CONFIG_FILE).is_file() => Some(Layer::from_file(Path::new(DEFAULT_CONFIG_FILE))?),
        None => None,
    };
    Ok(CliConfig::resolve(extra.over(global.layer()), Layer::from_env(&var)?, file))
}

fn orchestrator(config: &CliConfig) -> Result<Orchestrator, CliError> {
    let pack = config.prompt_pack()?;
    let mut orch = Orchestrator::new(&pack, config.build_backend()?);
    if config.backend == BackendKind::Live {
        orch = orch.with_settings(needcraft_core::orchestrator::EngineSettings {
            model: config.live.model.clone(),
            ..Default::default()
        });
    }
    Ok(orch)
}

fn env_var(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let extra = match &cli.command {
        Cmd::Serve { listen } => Layer {
            listen: *listen,
            ..Layer::default()
        },
        _ => Layer::default(),
    };
    let config = load_config(&cli.global, extra, env_var)?;
    match cli.command {
        Cmd::Serve { .. } => {
            config.validate(env_var)?;
            serve(&config).await
        }
        Cmd::Chat { session, query } => {
            config.validate(env_var)?;
            let orch = orchestrator(&config)?;
            let stdin = io::stdin();
            chat::chat(&orch, &session, &query.join(" "), config.mode, stdin.lock(), io::stdout()).await?;
            Ok(())
        }
        Cmd::Replay { expectation, bless } => {
            let fixtures = config.fixtures.clone().ok_or(ConfigError::MissingFixtures)?;
            if !fixtures.is_file() {
                return Err(ConfigError::FixtureNotFound(fixtures).into());
            }
            let pack = config.prompt_pack()?;
            let expected = replay::read_expectation(&expectation)?;
            let started = std::time::Instant::now();
            let report = replay::replay(&pack, &fixtures, &expected).await?;
            println!("{report}");
            println!("elapsed: {:.3}s", started.elapsed().as_secs_f64());
            if report.passed() {
                return Ok(());
            }
            if bless {
                let backend = Arc::new(needcraft_core::llm_backend::ScriptedBackend::from_file(&fixtures)?.strict(true));
                let orch = Orchestrator::new(&pack, backend);
                let run = expected.scenario.run(&orch).await?;
                let blessed = needcraft_core::orchestrator::Expectation {
                    scenario: expected.scenario.clone(),
                    events: run.events,
                    snapshot: needcraft_core::orchestrator::PanelSnapshot::capture(&run.state),
                };
                replay::write_json(&expectation, &blessed)?;
                println!("blessed {}", expectation.display());
                return Ok(());
            }
            Err(CliError::Mismatch("replay did not match the expectation".into()))
        }
        Cmd::Record {
            scenario,
            out_fixtures,
            out_expect,
        } => {
            config.validate(env_var)?;
            let text = std::fs::read_to_string(&scenario).map_err(|e| CliError::Io(format!("{}: {e}", scenario.display())))?;
            let scenario: Scenario =
                serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", scenario.display())))?;
            let pack = config.prompt_pack()?;
            let expectation = replay::record(&pack, config.build_backend()?, &scenario, &out_fixtures).await?;
            replay::write_json(&out_expect, &expectation)?;
            println!(
                "recorded {} events to {} and {}",
                expectation.events.len(),
                out_fixtures.display(),
                out_expect.display()
            );
            Ok(())
        }
        Cmd::Export { session, format } => {
            print!("{}", export::export(&config.storage, &session, format)?);
            Ok(())
        }
        Cmd::Prompts { dir } => {
            needcraft_core::agents::PromptPack::builtin()
                .write_dir(&dir)
                .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            println!("wrote prompt pack to {}", dir.display());
            Ok(())
        }
    }
}

async fn serve(config: &CliConfig) -> Result<(), CliError> {
    let orch = orchestrator(config)?;
    let store = FileStore::open(&config.storage).map_err(|e| CliError::Io(e.to_string()))?;
    let manager = SessionManager::new(
        orch,
        Arc::new(store),
        ServiceConfig {
            resume_interrupted: true,
            ..ServiceConfig::default()
        },
    );
    let recovered = manager.recover()?;
    let listener = tokio::net::TcpListener::bind(config.listen)
        .await
        .map_err(|e| CliError::Bind {
            addr: config.listen,
            message: e.to_string(),
        })?;
    let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
    tracing::info!(%addr, recovered = recovered.len(), "listening");
    println!("listening on http://{addr}");
    needcraft_service::serve(manager, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
    .map_err(|e| CliError::Io(e.to_string()))
}
