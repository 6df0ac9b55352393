//! Service configuration.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! policy = "policy.toml"
//! key_registry = "keys.toml"
//! nonce_cache = "state/nonces.log"
//! failure_mode = "refuse_all"     # or "abort"
//! step_budget = 16
//! token_ttl = 300                 # also the default replay horizon
//! nonce_horizon = 300
//! accept_on_device = false
//!
//! [adapter]
//! kind = "scripted"               # or "external"
//! script = "script.toml"          # optional
//!
//! [pages]                         # url -> page file served by Web_Crawl
//! "cooking.com" = "pages/cooking_com.txt"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use encprompt_core::crypto::{KeyRegistry, RegistryFile};
use encprompt_core::gateway::{FailureMode, GatewayConfig, DEFAULT_STEP_BUDGET};
use encprompt_core::policy::{load_registry, Registry};
use encprompt_core::scenario::ScriptStep;
use serde::Deserialize;

pub const CONFIG_ENV: &str = "ENCPROMPT_CONFIG";
pub const LISTEN_ENV: &str = "ENCPROMPT_LISTEN";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl ConfigError {
    fn read(path: &Path, e: impl ToString) -> Self {
        ConfigError::Read {
            path: path.to_owned(),
            message: e.to_string(),
        }
    }

    fn invalid(path: &Path, e: impl ToString) -> Self {
        ConfigError::Invalid {
            path: path.to_owned(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterConfig {
    /// Scripted mock model. Without a script it calls every API whose name
    /// appears in text it can see.
    Scripted {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    /// Chat-completions style HTTP endpoint (needs the `external-llm`
    /// feature).
    External {
        endpoint: String,
        model: String,
        /// Environment variable holding the bearer token, if any.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::Scripted { script: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub policy: PathBuf,
    pub key_registry: PathBuf,
    pub nonce_cache: PathBuf,
    #[serde(default)]
    pub failure_mode: FailureMode,
    #[serde(default = "default_step_budget")]
    pub step_budget: usize,
    #[serde(default = "default_ttl")]
    pub token_ttl: u64,
    #[serde(default)]
    pub nonce_horizon: Option<u64>,
    #[serde(default)]
    pub accept_on_device: bool,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub pages: BTreeMap<String, PathBuf>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_step_budget() -> usize {
    DEFAULT_STEP_BUDGET
}

fn default_ttl() -> u64 {
    encprompt_core::minter::DEFAULT_TTL
}

/// Scripted adapter file: the calls and the final answer.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(rename = "final")]
    pub final_text: String,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

/// A config with every referenced file loaded.
#[derive(Debug)]
pub struct LoadedConfig {
    pub config: ServiceConfig,
    pub registry: Registry,
    pub keys: KeyRegistry,
    pub script: Option<ScriptFile>,
    pub pages: BTreeMap<String, String>,
}

impl ServiceConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut config: ServiceConfig =
            toml::from_str(text).map_err(|e| ConfigError::invalid(path, e))?;
        if config.step_budget == 0 {
            return Err(ConfigError::invalid(path, "step_budget must be positive"));
        }
        if config.token_ttl == 0 {
            return Err(ConfigError::invalid(path, "token_ttl must be positive"));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.policy);
        resolve(&mut config.key_registry);
        resolve(&mut config.nonce_cache);
        if let AdapterConfig::Scripted { script: Some(p) } = &mut config.adapter {
            resolve(p);
        }
        config.pages.values_mut().for_each(resolve);
        Ok(config)
    }

    pub fn nonce_horizon(&self) -> u64 {
        self.nonce_horizon.unwrap_or(self.token_ttl)
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            failure_mode: self.failure_mode,
            step_budget: self.step_budget,
            accept_on_device: self.accept_on_device,
            session_ttl: self.token_ttl,
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::read(path, e))
}

pub fn load_policy_file(path: &Path) -> Result<Registry, ConfigError> {
    load_registry(&read(path)?).map_err(|e| ConfigError::invalid(path, e))
}

pub fn load_key_registry(path: &Path) -> Result<KeyRegistry, ConfigError> {
    RegistryFile::parse(&read(path)?)
        .and_then(|f| f.to_registry())
        .map_err(|e| ConfigError::invalid(path, e))
}

/// Reads the config and everything it points at. Any missing or invalid
/// file is an error; the nonce cache file is opened separately because it
/// may not exist yet.
pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let config = ServiceConfig::parse(&read(path)?, path)?;
    let registry = load_policy_file(&config.policy)?;
    let keys = load_key_registry(&config.key_registry)?;
    let script = match &config.adapter {
        AdapterConfig::Scripted { script: Some(p) } => {
            Some(toml::from_str(&read(p)?).map_err(|e| ConfigError::invalid(p, e))?)
        }
        AdapterConfig::Scripted { script: None } => None,
        AdapterConfig::External { .. } if !cfg!(feature = "external-llm") => {
            return Err(ConfigError::invalid(
                path,
                "adapter kind \"external\" needs a build with the external-llm feature",
            ));
        }
        AdapterConfig::External { .. } => None,
    };
    let mut pages = BTreeMap::new();
    for (url, p) in &config.pages {
        pages.insert(url.clone(), read(p)?);
    }
    if let Some(dir) = config.nonce_cache.parent() {
        if !dir.as_os_str().is_empty() && !dir.is_dir() {
            return Err(ConfigError::read(
                &config.nonce_cache,
                "parent directory does not exist",
            ));
        }
    }
    Ok(LoadedConfig {
        config,
        registry,
        keys,
        script,
        pages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults_and_resolved_paths() {
        let c = ServiceConfig::parse(
            "policy = \"p.toml\"\nkey_registry = \"/abs/k.toml\"\nnonce_cache = \"n.log\"\n",
            Path::new("/etc/encprompt/service.toml"),
        )
        .unwrap();
        assert_eq!(c.policy, Path::new("/etc/encprompt/p.toml"));
        assert_eq!(c.key_registry, Path::new("/abs/k.toml"));
        assert_eq!(c.listen, default_listen());
        assert_eq!(c.failure_mode, FailureMode::RefuseAll);
        assert_eq!(c.step_budget, 16);
        assert_eq!(c.nonce_horizon(), 300);
        assert_eq!(c.adapter, AdapterConfig::Scripted { script: None });
    }

    #[test]
    fn bad_values_are_rejected() {
        let p = Path::new("c.toml");
        for text in [
            "policy = \"p\"\nkey_registry = \"k\"\nnonce_cache = \"n\"\nstep_budget = 0\n",
            "policy = \"p\"\nkey_registry = \"k\"\nnonce_cache = \"n\"\nfailure_mode = \"explode\"\n",
            "policy = \"p\"\nkey_registry = \"k\"\n",
            "policy = \"p\"\nkey_registry = \"k\"\nnonce_cache = \"n\"\nbogus = 1\n",
        ] {
            assert!(ServiceConfig::parse(text, p).is_err(), "{text}");
        }
    }
}
