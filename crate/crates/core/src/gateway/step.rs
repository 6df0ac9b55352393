//! What the model emits and what the gateway feeds back to it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A tool call requested by the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub api: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl ActionRequest {
    pub fn new(api: impl Into<String>) -> Self {
        Self {
            api: api.into(),
            args: BTreeMap::new(),
        }
    }

    pub fn arg(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.args.insert(key.into(), value.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LlmStep {
    /// Final answer; ends the loop.
    Say {
        text: String,
    },
    Call(ActionRequest),
}

/// The conversation as the model sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum HistoryItem {
    User {
        text: String,
    },
    Assistant {
        step: LlmStep,
    },
    /// Tool output, or the gateway's notice that a call was not run.
    Observation {
        api: String,
        text: String,
    },
}

impl HistoryItem {
    /// Text the model reads from outside itself (user input and tool
    /// output).
    pub fn visible_text(&self) -> Option<&str> {
        match self {
            HistoryItem::User { text } | HistoryItem::Observation { text, .. } => Some(text),
            HistoryItem::Assistant { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("model adapter failed: {0}")]
pub struct AdapterError(pub String);

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ToolError(pub String);

/// Produces the model's next step. Implementations must eventually return
/// [`LlmStep::Say`]; the gateway cuts them off at its step budget.
pub trait LlmAdapter {
    fn next_step(&mut self, history: &[HistoryItem]) -> Result<LlmStep, AdapterError>;
}

/// Runs a tool. The gateway only calls this after a `Decision::Execute`.
pub trait ToolExecutor {
    fn execute(&mut self, request: &ActionRequest) -> Result<String, ToolError>;
}

impl<T: LlmAdapter + ?Sized> LlmAdapter for Box<T> {
    fn next_step(&mut self, history: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        (**self).next_step(history)
    }
}

impl<T: ToolExecutor + ?Sized> ToolExecutor for Box<T> {
    fn execute(&mut self, request: &ActionRequest) -> Result<String, ToolError> {
        (**self).execute(request)
    }
}
