//! Model adapters available to `serve`.

use std::collections::BTreeSet;
use std::sync::Arc;

use encprompt_core::gateway::{ActionRequest, AdapterError, HistoryItem, LlmAdapter, LlmStep};
use encprompt_core::policy::Registry;
use encprompt_core::scenario::ScriptedAdapter;

use crate::config::{AdapterConfig, ScriptFile};

/// Mock model that calls every registry API whose name shows up in text it
/// can see, once each, then stops. Handy for poking the service by hand.
pub struct KeywordAdapter {
    apis: Vec<String>,
    called: BTreeSet<String>,
}

impl KeywordAdapter {
    pub fn new(registry: &Registry) -> Self {
        Self {
            apis: registry.apis().iter().map(|a| a.name.clone()).collect(),
            called: BTreeSet::new(),
        }
    }
}

impl LlmAdapter for KeywordAdapter {
    fn next_step(&mut self, history: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        let seen = |name: &str| {
            history
                .iter()
                .filter_map(HistoryItem::visible_text)
                .any(|t| t.contains(name))
        };
        let next = self
            .apis
            .iter()
            .find(|api| !self.called.contains(*api) && seen(api))
            .cloned();
        Ok(match next {
            Some(api) => {
                self.called.insert(api.clone());
                LlmStep::Call(ActionRequest::new(api))
            }
            None => LlmStep::Say {
                text: format!("finished after {} calls", self.called.len()),
            },
        })
    }
}

pub type AdapterFactory = Arc<dyn Fn() -> Box<dyn LlmAdapter + Send> + Send + Sync>;

/// Builds a fresh adapter per request from the service config.
pub fn adapter_factory(
    config: &AdapterConfig,
    script: Option<ScriptFile>,
    registry: Arc<Registry>,
) -> AdapterFactory {
    match (config, script) {
        (AdapterConfig::Scripted { .. }, Some(script)) => Arc::new(move || {
            Box::new(ScriptedAdapter::new(
                script.script.clone(),
                script.final_text.clone(),
            ))
        }),
        (AdapterConfig::Scripted { .. }, None) => {
            Arc::new(move || Box::new(KeywordAdapter::new(&registry)))
        }
        #[cfg(feature = "external-llm")]
        (
            AdapterConfig::External {
                endpoint,
                model,
                api_key_env,
            },
            _,
        ) => {
            let api_key = api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
            let endpoint = endpoint.clone();
            let model = model.clone();
            Arc::new(move || {
                Box::new(external::ChatCompletionsAdapter::new(
                    endpoint.clone(),
                    model.clone(),
                    api_key.clone(),
                    &registry,
                ))
            })
        }
        #[cfg(not(feature = "external-llm"))]
        (AdapterConfig::External { .. }, _) => {
            // config::load refuses this combination.
            Arc::new(|| Box::new(Unavailable))
        }
    }
}

#[cfg(not(feature = "external-llm"))]
struct Unavailable;

#[cfg(not(feature = "external-llm"))]
impl LlmAdapter for Unavailable {
    fn next_step(&mut self, _: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        Err(AdapterError(
            "built without the external-llm feature".into(),
        ))
    }
}

#[cfg(feature = "external-llm")]
pub mod external {
    //! Chat-completions endpoint with function calling. Each registry API
    //! is offered as a function taking string arguments.

    use std::collections::BTreeMap;
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::*;

    pub struct ChatCompletionsAdapter {
        client: reqwest::blocking::Client,
        endpoint: String,
        model: String,
        api_key: Option<String>,
        tools: Value,
    }

    impl ChatCompletionsAdapter {
        pub fn new(
            endpoint: String,
            model: String,
            api_key: Option<String>,
            registry: &Registry,
        ) -> Self {
            let tools = registry
                .apis()
                .iter()
                .map(|api| {
                    json!({
                        "type": "function",
                        "function": {
                            "name": api.name,
                            "parameters": {
                                "type": "object",
                                "additionalProperties": {"type": "string"}
                            }
                        }
                    })
                })
                .collect();
            Self {
                client: reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(60))
                    .build()
                    .expect("static client config"),
                endpoint,
                model,
                api_key,
                tools: Value::Array(tools),
            }
        }

        fn messages(history: &[HistoryItem]) -> Vec<Value> {
            let mut calls = 0;
            let mut out = Vec::new();
            for item in history {
                out.push(match item {
                    HistoryItem::User { text } => json!({"role": "user", "content": text}),
                    HistoryItem::Assistant {
                        step: LlmStep::Say { text },
                    } => json!({"role": "assistant", "content": text}),
                    HistoryItem::Assistant {
                        step: LlmStep::Call(req),
                    } => {
                        calls += 1;
                        json!({
                            "role": "assistant",
                            "content": null,
                            "tool_calls": [{
                                "id": format!("call_{calls}"),
                                "type": "function",
                                "function": {
                                    "name": req.api,
                                    "arguments": serde_json::to_string(&req.args).unwrap_or_default()
                                }
                            }]
                        })
                    }
                    HistoryItem::Observation { text, .. } => {
                        json!({"role": "tool", "tool_call_id": format!("call_{calls}"), "content": text})
                    }
                });
            }
            out
        }
    }

    impl LlmAdapter for ChatCompletionsAdapter {
        fn next_step(&mut self, history: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
            let body = json!({
                "model": self.model,
                "messages": Self::messages(history),
                "tools": self.tools,
            });
            let mut request = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let response: Value = request
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json())
                .map_err(|e| AdapterError(e.to_string()))?;
            let message = &response["choices"][0]["message"];
            if let Some(call) = message["tool_calls"].get(0) {
                let name = call["function"]["name"]
                    .as_str()
                    .ok_or_else(|| AdapterError("tool call without a name".into()))?;
                let args: BTreeMap<String, Value> =
                    serde_json::from_str(call["function"]["arguments"].as_str().unwrap_or("{}"))
                        .unwrap_or_default();
                let args = args
                    .into_iter()
                    .map(|(k, v)| (k, v.as_str().map_or_else(|| v.to_string(), str::to_owned)))
                    .collect();
                return Ok(LlmStep::Call(ActionRequest {
                    api: name.to_owned(),
                    args,
                }));
            }
            match message["content"].as_str() {
                Some(text) => Ok(LlmStep::Say {
                    text: text.to_owned(),
                }),
                None => Err(AdapterError(format!("unexpected response: {response}"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use encprompt_core::policy::load_registry;

    #[test]
    fn keyword_adapter_calls_named_apis_once() {
        let registry = load_registry(
            "max_level = 1\n[[apis]]\nname = \"Find_Photo\"\nkind = \"read\"\nrequired = { min_level = 1 }\non_deny = \"reject\"\n",
        )
        .unwrap();
        let mut a = KeywordAdapter::new(&registry);
        let history = vec![HistoryItem::User {
            text: "please Find_Photo".into(),
        }];
        assert_eq!(
            a.next_step(&history).unwrap(),
            LlmStep::Call(ActionRequest::new("Find_Photo"))
        );
        assert!(matches!(
            a.next_step(&history).unwrap(),
            LlmStep::Say { .. }
        ));
    }
}
