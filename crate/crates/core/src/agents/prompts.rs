use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::AgentRole;

const TEAM_INTRO: &str = include_str!("../../prompts/team_intro.md");
const INQUIRY: &str = include_str!("../../prompts/inquiry.md");
const MILESTONE: &str = include_str!("../../prompts/milestone.md");
const NEEDS_DISCOVERY: &str = include_str!("../../prompts/needs_discovery.md");
const RANKING: &str = include_str!("../../prompts/ranking.md");
const SOLUTION_CRAFT: &str = include_str!("../../prompts/solution_craft.md");
const BASELINE: &str = include_str!("../../prompts/baseline.md");

pub const TEAM_INTRO_FILE: &str = "team_intro.md";
pub const BASELINE_FILE: &str = "baseline.md";

#[derive(Debug, Error)]
pub enum PromptPackError {
    #[error("prompt pack directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("prompt pack file {0} is missing")]
    MissingFile(PathBuf),
    #[error("prompt pack file {path} is empty")]
    EmptyFile { path: PathBuf },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Team introduction plus one prompt per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPack {
    pub team_intro: String,
    pub inquiry: String,
    pub milestone: String,
    pub needs_discovery: String,
    pub ranking: String,
    pub solution_craft: String,
    /// Single prompt for baseline sessions.
    pub baseline: String,
}

impl Default for PromptPack {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptPack {
    /// The pack compiled into the binary.
    pub fn builtin() -> Self {
        Self {
            team_intro: TEAM_INTRO.to_string(),
            inquiry: INQUIRY.to_string(),
            milestone: MILESTONE.to_string(),
            needs_discovery: NEEDS_DISCOVERY.to_string(),
            ranking: RANKING.to_string(),
            solution_craft: SOLUTION_CRAFT.to_string(),
            baseline: BASELINE.to_string(),
        }
    }

    /// Loads a pack from a directory. The team introduction and all five role
    /// files are required; `baseline.md` falls back to the built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptPackError> {
        if !dir.is_dir() {
            return Err(PromptPackError::MissingDir(dir.to_path_buf()));
        }
        let read = |name: &str| -> Result<String, PromptPackError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) if text.trim().is_empty() => Err(PromptPackError::EmptyFile { path }),
                Ok(text) => Ok(text),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    Err(PromptPackError::MissingFile(path))
                }
                Err(source) => Err(PromptPackError::Io { path, source }),
            }
        };
        let baseline = match read(BASELINE_FILE) {
            Ok(text) => text,
            Err(PromptPackError::MissingFile(_)) => BASELINE.to_string(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            team_intro: read(TEAM_INTRO_FILE)?,
            inquiry: read(AgentRole::Inquiry.prompt_file())?,
            milestone: read(AgentRole::Milestone.prompt_file())?,
            needs_discovery: read(AgentRole::NeedsDiscovery.prompt_file())?,
            ranking: read(AgentRole::Ranking.prompt_file())?,
            solution_craft: read(AgentRole::SolutionCraft.prompt_file())?,
            baseline,
        })
    }

    pub fn role_prompt(&self, role: AgentRole) -> &str {
        match role {
            AgentRole::Inquiry => &self.inquiry,
            AgentRole::Milestone => &self.milestone,
            AgentRole::NeedsDiscovery => &self.needs_discovery,
            AgentRole::Ranking => &self.ranking,
            AgentRole::SolutionCraft => &self.solution_craft,
        }
    }

    /// Team introduction followed by the role prompt.
    pub fn system_prompt(&self, role: AgentRole) -> String {
        format!("{}\n\n{}", self.team_intro.trim_end(), self.role_prompt(role).trim_end())
    }

    /// Writes the pack as a directory of markdown files.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TEAM_INTRO_FILE), &self.team_intro)?;
        for role in AgentRole::ALL {
            fs::write(dir.join(role.prompt_file()), self.role_prompt(role))?;
        }
        fs::write(dir.join(BASELINE_FILE), &self.baseline)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_pack_declares_each_allow_list() {
        let pack = PromptPack::builtin();
        assert!(pack.inquiry.contains("You can only call functions: `[fill_need_slot]`"));
        assert!(pack
            .needs_discovery
            .contains("You can only call functions: `[add_need_slot, get_all_needs]`"));
        for role in AgentRole::ALL {
            assert!(pack.system_prompt(role).starts_with(pack.team_intro.trim_end()));
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pack = PromptPack::builtin();
        pack.ranking = "custom ranking".into();
        pack.write_dir(dir.path()).unwrap();
        assert_eq!(PromptPack::load_dir(dir.path()).unwrap(), pack);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        PromptPack::builtin().write_dir(dir.path()).unwrap();
        fs::remove_file(dir.path().join("milestone.md")).unwrap();
        let err = PromptPack::load_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("milestone.md"), "{err}");
        fs::remove_file(dir.path().join("baseline.md")).unwrap();
        PromptPack::builtin().write_dir(dir.path()).unwrap();
        fs::remove_file(dir.path().join("baseline.md")).unwrap();
        assert_eq!(PromptPack::load_dir(dir.path()).unwrap().baseline, BASELINE);
    }

    #[test]
    fn missing_dir() {
        assert!(matches!(
            PromptPack::load_dir(Path::new("/nonexistent/pack")),
            Err(PromptPackError::MissingDir(_))
        ));
    }
}
