//! Permission models and the per-call decision engine.
//!
//! [`check`] is the only place an allow/deny verdict is computed. It is pure:
//! the caller owns the session state and decides whether to keep the returned
//! successor.

mod graph;
mod permission;
mod registry;

pub use graph::{graph_run, GraphError, SequenceGraph, Transition};
pub use permission::{CapabilityBits, Permission};
pub use registry::{
    load_registry, ApiKind, ApiSpec, ConfigError, DenyAction, Diagnostic, Registry, Requirement,
};

use serde::{Deserialize, Serialize};

/// The three enforcement outcomes for an action request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Execute,
    Reject { reason: String },
    RequestVerification { hint: String },
}

impl Decision {
    pub fn is_execute(&self) -> bool {
        matches!(self, Decision::Execute)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Decision::Execute => "execute",
            Decision::Reject { .. } => "reject",
            Decision::RequestVerification { .. } => "request_verification",
        }
    }
}

/// Per-session policy state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPolicyState {
    /// Current sequence-graph state; present iff the permission is a sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_state: Option<String>,
    /// Set once any tool output has been fed back into the model's context.
    #[serde(default)]
    pub external_content: bool,
}

impl SessionPolicyState {
    pub fn initial(permission: &Permission, registry: &Registry) -> Self {
        let graph_state = match permission {
            Permission::Sequence(id) => registry.graph(id).map(|g| g.start().to_owned()),
            _ => None,
        };
        Self {
            graph_state,
            external_content: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown api {0:?}")]
    UnknownApi(String),
    #[error("{permission} permission cannot authorize {api}: no {needed} declared for it")]
    ModelMismatch {
        permission: &'static str,
        api: String,
        needed: &'static str,
    },
    #[error("invalid permission: {0}")]
    InvalidPermission(String),
    #[error("session state {0:?} is not a state of the permission's graph")]
    InvalidState(String),
}

/// Decides whether `api` may run under `permission`.
///
/// On allow the returned state has advanced (sequence permissions only). On
/// deny the returned state equals `state` and the decision is the API's
/// configured deny action.
pub fn check(
    permission: &Permission,
    api: &str,
    state: &SessionPolicyState,
    registry: &Registry,
) -> Result<(Decision, SessionPolicyState), PolicyError> {
    let spec = registry
        .api(api)
        .ok_or_else(|| PolicyError::UnknownApi(api.to_owned()))?;
    permission.validate(registry)?;

    let denial = match permission {
        Permission::Level(level) => {
            let needed = spec.required.min_level.ok_or(PolicyError::ModelMismatch {
                permission: "level",
                api: api.to_owned(),
                needed: "min_level",
            })?;
            if *level >= needed {
                return Ok((Decision::Execute, state.clone()));
            }
            format!("{api} requires permission level {needed}, token grants level {level}")
        }
        Permission::Capabilities(bits) => {
            let index = spec
                .required
                .capability_index
                .ok_or(PolicyError::ModelMismatch {
                    permission: "capabilities",
                    api: api.to_owned(),
                    needed: "capability_index",
                })?;
            if bits.get(index) == Some(true) {
                return Ok((Decision::Execute, state.clone()));
            }
            format!("{api} requires capability bit {index}, which the token does not grant")
        }
        Permission::Sequence(id) => {
            // validate() guarantees the graph exists.
            let graph = registry
                .graph(id)
                .ok_or_else(|| PolicyError::InvalidPermission(format!("unknown graph {id:?}")))?;
            let current = state.graph_state.as_deref().unwrap_or(graph.start());
            if !graph.contains_state(current) {
                return Err(PolicyError::InvalidState(current.to_owned()));
            }
            if let Some(next) = graph.step(current, api) {
                let advanced = SessionPolicyState {
                    graph_state: Some(next.to_owned()),
                    external_content: state.external_content,
                };
                return Ok((Decision::Execute, advanced));
            }
            format!("{api} is not allowed after state {current:?} of sequence {id:?}")
        }
    };

    let decision = match spec.deny_action(state.external_content) {
        DenyAction::Reject => Decision::Reject { reason: denial },
        DenyAction::RequestVerification => Decision::RequestVerification { hint: denial },
    };
    Ok((decision, state.clone()))
}
