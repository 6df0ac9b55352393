use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::ScenarioError;

/// Where scenario files, page fixtures and the demo policy come from.
/// Paths are relative and `/`-separated, e.g. `pages/cooking_com.txt`.
pub trait FixtureSource {
    fn read(&self, path: &str) -> Result<String, ScenarioError>;

    /// Scenario names (file stems under `scenarios/`), sorted.
    fn scenario_names(&self) -> Result<Vec<String>, ScenarioError>;
}

const EMBEDDED: &[(&str, &str)] = &[
    ("policy.toml", include_str!("../../fixtures/policy.toml")),
    ("rules.toml", include_str!("../../fixtures/rules.toml")),
    (
        "pages/cooking_com.txt",
        include_str!("../../fixtures/pages/cooking_com.txt"),
    ),
    (
        "scenarios/malicious_llm.toml",
        include_str!("../../fixtures/scenarios/malicious_llm.toml"),
    ),
    (
        "scenarios/malicious_user.toml",
        include_str!("../../fixtures/scenarios/malicious_user.toml"),
    ),
    (
        "scenarios/malicious_web.toml",
        include_str!("../../fixtures/scenarios/malicious_web.toml"),
    ),
    (
        "scenarios/overview_adversarial.toml",
        include_str!("../../fixtures/scenarios/overview_adversarial.toml"),
    ),
    (
        "scenarios/overview_benign.toml",
        include_str!("../../fixtures/scenarios/overview_benign.toml"),
    ),
    (
        "scenarios/tamper.toml",
        include_str!("../../fixtures/scenarios/tamper.toml"),
    ),
];

/// The fixtures shipped with the crate, compiled in.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmbeddedFixtures;

impl FixtureSource for EmbeddedFixtures {
    fn read(&self, path: &str) -> Result<String, ScenarioError> {
        EMBEDDED
            .iter()
            .find(|(p, _)| *p == path)
            .map(|(_, text)| (*text).to_owned())
            .ok_or_else(|| ScenarioError::FixtureMissing(path.to_owned()))
    }

    fn scenario_names(&self) -> Result<Vec<String>, ScenarioError> {
        let mut names: Vec<String> = EMBEDDED
            .iter()
            .filter_map(|(p, _)| p.strip_prefix("scenarios/")?.strip_suffix(".toml"))
            .map(str::to_owned)
            .collect();
        names.sort();
        Ok(names)
    }
}

/// Fixtures read from a directory laid out like the embedded set.
#[derive(Clone, Debug)]
pub struct DirFixtures {
    root: PathBuf,
}

impl DirFixtures {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FixtureSource for DirFixtures {
    fn read(&self, path: &str) -> Result<String, ScenarioError> {
        if path.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(ScenarioError::FixtureMissing(path.to_owned()));
        }
        fs::read_to_string(self.root.join(path)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ScenarioError::FixtureMissing(path.to_owned()),
            _ => ScenarioError::Io {
                path: path.to_owned(),
                message: e.to_string(),
            },
        })
    }

    fn scenario_names(&self) -> Result<Vec<String>, ScenarioError> {
        let dir = self.root.join("scenarios");
        let entries = fs::read_dir(&dir).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ScenarioError::FixtureMissing("scenarios/".into()),
            _ => ScenarioError::Io {
                path: "scenarios/".into(),
                message: e.to_string(),
            },
        })?;
        let mut names = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "toml") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_owned());
                }
            }
        }
        names.sort();
        Ok(names)
    }
}
