//! The API registry and its config-file loader.
//!
//! Schema (TOML):
//!
//! ```toml
//! max_level = 2
//!
//! [[apis]]
//! name = "Send_Email"
//! kind = "write"                                   # read | write, informational
//! required = { min_level = 2, capability_index = 0 }
//! on_deny = "request_verification"                 # reject | request_verification
//! on_deny_external = "reject"                      # optional, see ApiSpec
//!
//! [graphs.browse_then_report]
//! start = "idle"
//! states = ["idle", "browsed", "reported"]
//! transitions = [
//!   { from = "idle", api = "Web_Crawl", to = "browsed" },
//! ]
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::graph::{SequenceGraph, Transition};
use crate::ident::is_identifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyAction {
    Reject,
    RequestVerification,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiKind {
    #[default]
    Read,
    Write,
}

/// What each permission model needs to see before allowing an API.
/// A model whose field is absent cannot authorize the API at all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirement {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_level: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ApiSpec {
    pub name: String,
    pub required: Requirement,
    pub on_deny: DenyAction,
    /// Deny action once tool output has entered the session's context.
    /// Falls back to `on_deny` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub on_deny_external: Option<DenyAction>,
    pub kind: ApiKind,
}

impl ApiSpec {
    pub fn deny_action(&self, external_content: bool) -> DenyAction {
        if external_content {
            self.on_deny_external.unwrap_or(self.on_deny)
        } else {
            self.on_deny
        }
    }
}

/// Immutable after construction; share it behind an `Arc`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    apis: Vec<ApiSpec>,
    by_name: HashMap<String, usize>,
    max_level: u32,
    graphs: BTreeMap<String, SequenceGraph>,
}

impl Registry {
    pub fn new(
        max_level: u32,
        apis: Vec<ApiSpec>,
        graphs: BTreeMap<String, SequenceGraph>,
    ) -> Result<Self, ConfigError> {
        let mut diags = Vec::new();
        validate(max_level, &apis, &graphs, &mut diags);
        if !diags.is_empty() {
            return Err(ConfigError { diagnostics: diags });
        }
        let by_name = apis
            .iter()
            .enumerate()
            .map(|(i, a)| (a.name.clone(), i))
            .collect();
        Ok(Self {
            apis,
            by_name,
            max_level,
            graphs,
        })
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn len(&self) -> usize {
        self.apis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apis.is_empty()
    }

    /// APIs in declaration order.
    pub fn apis(&self) -> &[ApiSpec] {
        &self.apis
    }

    pub fn api(&self, name: &str) -> Option<&ApiSpec> {
        self.by_name.get(name).map(|&i| &self.apis[i])
    }

    pub fn graph(&self, id: &str) -> Option<&SequenceGraph> {
        self.graphs.get(id)
    }

    pub fn graphs(&self) -> &BTreeMap<String, SequenceGraph> {
        &self.graphs
    }
}

fn validate(
    max_level: u32,
    apis: &[ApiSpec],
    graphs: &BTreeMap<String, SequenceGraph>,
    diags: &mut Vec<Diagnostic>,
) {
    if max_level == 0 {
        diags.push(Diagnostic::new("max_level", "must be at least 1"));
    }
    let mut names = HashSet::new();
    let mut cap_owner: HashMap<usize, &str> = HashMap::new();
    for (i, api) in apis.iter().enumerate() {
        let at = |field: &str| format!("apis[{i}].{field}");
        if !is_identifier(&api.name) {
            diags.push(Diagnostic::new(
                at("name"),
                format!("invalid api name {:?}", api.name),
            ));
        }
        if !names.insert(api.name.as_str()) {
            diags.push(Diagnostic::new(
                at("name"),
                format!("duplicate api {:?}", api.name),
            ));
        }
        let req = api.required;
        if req.min_level.is_none() && req.capability_index.is_none() {
            diags.push(Diagnostic::new(
                at("required"),
                "needs min_level, capability_index, or both",
            ));
        }
        if let Some(level) = req.min_level {
            if level == 0 || level > max_level {
                diags.push(Diagnostic::new(
                    at("required.min_level"),
                    format!("{level} outside 1..={max_level}"),
                ));
            }
        }
        if let Some(index) = req.capability_index {
            if index >= apis.len() {
                diags.push(Diagnostic::new(
                    at("required.capability_index"),
                    format!("{index} out of range for {} apis", apis.len()),
                ));
            } else if let Some(prev) = cap_owner.insert(index, &api.name) {
                diags.push(Diagnostic::new(
                    at("required.capability_index"),
                    format!("{index} already assigned to {prev:?}"),
                ));
            }
        }
    }
    for (id, graph) in graphs {
        if !is_identifier(id) {
            diags.push(Diagnostic::new(format!("graphs.{id}"), "invalid graph id"));
        }
        for t in graph.transitions() {
            if !names.contains(t.api.as_str()) {
                diags.push(Diagnostic::new(
                    format!("graphs.{id}.transitions"),
                    format!("transition on undeclared api {:?}", t.api),
                ));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    /// Dotted path of the offending field, e.g. `apis[2].name`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub diagnostics: Vec<Diagnostic>,
}

impl ConfigError {
    pub fn single(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            diagnostics: vec![Diagnostic::new(path, message)],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid policy config")?;
        for d in &self.diagnostics {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    max_level: u32,
    #[serde(default)]
    apis: Vec<RawApi>,
    #[serde(default)]
    graphs: BTreeMap<String, RawGraph>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApi {
    name: String,
    required: Requirement,
    on_deny: DenyAction,
    #[serde(default)]
    on_deny_external: Option<DenyAction>,
    #[serde(default)]
    kind: ApiKind,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    start: String,
    states: Vec<String>,
    #[serde(default)]
    transitions: Vec<RawTransition>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransition {
    from: String,
    api: String,
    to: String,
}

/// Parses and validates a policy file, reporting every problem found.
pub fn load_registry(config: &str) -> Result<Registry, ConfigError> {
    let raw: RawPolicy = toml::from_str(config).map_err(|e| {
        let path = e
            .span()
            .map(|s| format!("byte {}", s.start))
            .unwrap_or_else(|| "<document>".into());
        ConfigError::single(path, e.message())
    })?;

    let mut diags = Vec::new();
    let mut graphs = BTreeMap::new();
    for (id, g) in raw.graphs {
        let declared: HashSet<&str> = g.states.iter().map(String::as_str).collect();
        let mut ok = true;
        if declared.len() != g.states.len() {
            diags.push(Diagnostic::new(
                format!("graphs.{id}.states"),
                "duplicate state",
            ));
        }
        if !declared.contains(g.start.as_str()) {
            diags.push(Diagnostic::new(
                format!("graphs.{id}.start"),
                format!("start state {:?} is not declared", g.start),
            ));
            ok = false;
        }
        for (i, t) in g.transitions.iter().enumerate() {
            for endpoint in [&t.from, &t.to] {
                if !declared.contains(endpoint.as_str()) {
                    diags.push(Diagnostic::new(
                        format!("graphs.{id}.transitions[{i}]"),
                        format!("references undeclared state {endpoint:?}"),
                    ));
                    ok = false;
                }
            }
        }
        if !ok {
            continue;
        }
        let transitions = g.transitions.into_iter().map(|t| Transition {
            from: t.from,
            api: t.api,
            to: t.to,
        });
        match SequenceGraph::new(g.states, g.start, transitions) {
            Ok(graph) => {
                graphs.insert(id, graph);
            }
            Err(e) => diags.push(Diagnostic::new(format!("graphs.{id}"), e.to_string())),
        }
    }

    let apis = raw
        .apis
        .into_iter()
        .map(|a| ApiSpec {
            name: a.name,
            required: a.required,
            on_deny: a.on_deny,
            on_deny_external: a.on_deny_external,
            kind: a.kind,
        })
        .collect::<Vec<_>>();

    validate(raw.max_level, &apis, &graphs, &mut diags);
    if !diags.is_empty() {
        return Err(ConfigError { diagnostics: diags });
    }
    Registry::new(raw.max_level, apis, graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = include_str!("../../fixtures/policy.toml");

    #[test]
    fn demo_registry_loads() {
        let reg = load_registry(DEMO).unwrap();
        assert_eq!(reg.max_level(), 2);
        let names: Vec<_> = reg.apis().iter().map(|a| a.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "Send_Email",
                "Web_Crawl",
                "Delete_Email",
                "Find_Photo",
                "Move_Data"
            ]
        );
        assert_eq!(reg.api("Web_Crawl").unwrap().required.min_level, Some(1));
        assert_eq!(reg.api("Send_Email").unwrap().required.min_level, Some(2));
    }

    #[test]
    fn duplicate_api_is_rejected() {
        let cfg = r#"
            max_level = 1
            [[apis]]
            name = "A"
            required = { min_level = 1 }
            on_deny = "reject"
            [[apis]]
            name = "A"
            required = { min_level = 1 }
            on_deny = "reject"
        "#;
        let err = load_registry(cfg).unwrap_err();
        assert_eq!(err.diagnostics.len(), 1);
        assert_eq!(err.diagnostics[0].path, "apis[1].name");
        assert!(err.diagnostics[0].message.contains("duplicate"));
    }

    #[test]
    fn dangling_graph_state_is_rejected() {
        let cfg = r#"
            max_level = 1
            [[apis]]
            name = "A"
            required = { min_level = 1 }
            on_deny = "reject"
            [graphs.g]
            start = "s0"
            states = ["s0"]
            transitions = [{ from = "s0", api = "A", to = "nowhere" }]
        "#;
        let err = load_registry(cfg).unwrap_err();
        assert_eq!(err.diagnostics[0].path, "graphs.g.transitions[0]");
        assert!(err.diagnostics[0].message.contains("nowhere"));
    }

    #[test]
    fn out_of_range_index_and_level() {
        let cfg = r#"
            max_level = 2
            [[apis]]
            name = "A"
            required = { min_level = 3, capability_index = 1 }
            on_deny = "reject"
        "#;
        let err = load_registry(cfg).unwrap_err();
        let paths: Vec<_> = err.diagnostics.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(
            paths,
            [
                "apis[0].required.min_level",
                "apis[0].required.capability_index"
            ]
        );
    }

    #[test]
    fn shared_capability_index_is_rejected() {
        let cfg = r#"
            max_level = 1
            [[apis]]
            name = "A"
            required = { capability_index = 0 }
            on_deny = "reject"
            [[apis]]
            name = "B"
            required = { capability_index = 0 }
            on_deny = "reject"
        "#;
        assert!(load_registry(cfg).is_err());
    }

    #[test]
    fn graph_on_undeclared_api_is_rejected() {
        let cfg = r#"
            max_level = 1
            [graphs.g]
            start = "s0"
            states = ["s0"]
            transitions = [{ from = "s0", api = "Ghost", to = "s0" }]
        "#;
        let err = load_registry(cfg).unwrap_err();
        assert!(err.to_string().contains("Ghost"));
    }

    #[test]
    fn empty_registry_is_valid() {
        let reg = load_registry("max_level = 1").unwrap();
        assert!(reg.is_empty());
    }

    #[test]
    fn syntax_errors_are_reported() {
        let err = load_registry("max_level = ").unwrap_err();
        assert_eq!(err.diagnostics.len(), 1);
    }

    #[test]
    fn external_deny_falls_back() {
        let reg = load_registry(DEMO).unwrap();
        let send = reg.api("Send_Email").unwrap();
        assert_eq!(send.deny_action(false), DenyAction::RequestVerification);
        assert_eq!(send.deny_action(true), DenyAction::Reject);
        let mv = reg.api("Move_Data").unwrap();
        assert_eq!(mv.deny_action(true), mv.on_deny);
    }
}
