//! Mock model adapters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{ActionRequest, AdapterError, HistoryItem, LlmAdapter, LlmStep};

/// Marker that stands in for a working adversarial prompt. Scripted
/// adapters treat its presence in visible text as a successful injection.
pub const ADV_MARKER: &str = "<ADV_PROMPT>";

/// One scripted call. It fires once, the first time `when` appears in text
/// the model can see; an empty `when` fires unconditionally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    #[serde(default)]
    pub when: String,
    pub api: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

/// Plays back a script against whatever the gateway feeds it, then answers
/// with `final_text`.
#[derive(Clone, Debug)]
pub struct ScriptedAdapter {
    script: Vec<ScriptStep>,
    fired: Vec<bool>,
    final_text: String,
}

impl ScriptedAdapter {
    pub fn new(script: Vec<ScriptStep>, final_text: impl Into<String>) -> Self {
        Self {
            fired: vec![false; script.len()],
            script,
            final_text: final_text.into(),
        }
    }
}

impl LlmAdapter for ScriptedAdapter {
    fn next_step(&mut self, history: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        let visible = |needle: &str| {
            needle.is_empty()
                || history
                    .iter()
                    .filter_map(HistoryItem::visible_text)
                    .any(|t| t.contains(needle))
        };
        for (step, fired) in self.script.iter().zip(self.fired.iter_mut()) {
            if !*fired && visible(&step.when) {
                *fired = true;
                return Ok(LlmStep::Call(ActionRequest {
                    api: step.api.clone(),
                    args: step.args.clone(),
                }));
            }
        }
        Ok(LlmStep::Say {
            text: self.final_text.clone(),
        })
    }
}

/// Emits random calls over an API alphabet, plus names outside it. With
/// `say_probability == 0` it never finishes on its own.
#[derive(Clone, Debug)]
pub struct RandomAdapter {
    rng: ChaCha20Rng,
    alphabet: Vec<String>,
    say_probability: f64,
}

/// Names no sane registry declares, and near-misses of real ones.
pub const ROGUE_APIS: &[&str] = &[
    "Format_Disk",
    "send_email",
    "Send_Email ",
    "",
    "Move_Data\0",
];

impl RandomAdapter {
    pub fn new(rng: ChaCha20Rng, alphabet: Vec<String>, say_probability: f64) -> Self {
        Self {
            rng,
            alphabet,
            say_probability,
        }
    }
}

impl LlmAdapter for RandomAdapter {
    fn next_step(&mut self, history: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        if self.rng.gen_bool(self.say_probability) {
            return Ok(LlmStep::Say {
                text: format!("done after {} turns", history.len()),
            });
        }
        let api = if self.alphabet.is_empty() || self.rng.gen_ratio(1, 10) {
            ROGUE_APIS[self.rng.gen_range(0..ROGUE_APIS.len())].to_owned()
        } else {
            self.alphabet[self.rng.gen_range(0..self.alphabet.len())].clone()
        };
        let mut request = ActionRequest::new(api);
        if self.rng.gen_bool(0.5) {
            // Echo something the model saw, the way an injected model would.
            let echoed = history
                .iter()
                .rev()
                .find_map(HistoryItem::visible_text)
                .unwrap_or_default();
            request = request.arg("payload", echoed.chars().take(40).collect::<String>());
        }
        Ok(LlmStep::Call(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn user(text: &str) -> HistoryItem {
        HistoryItem::User { text: text.into() }
    }

    #[test]
    fn marker_gated_call_fires_only_when_visible() {
        let script = vec![ScriptStep {
            when: ADV_MARKER.into(),
            api: "Send_Email".into(),
            args: BTreeMap::new(),
        }];
        let mut clean = ScriptedAdapter::new(script.clone(), "ok");
        assert!(matches!(
            clean.next_step(&[user("hi")]).unwrap(),
            LlmStep::Say { .. }
        ));

        let mut hit = ScriptedAdapter::new(script, "ok");
        let history = [
            user("recipe please"),
            HistoryItem::Observation {
                api: "Web_Crawl".into(),
                text: format!("text {ADV_MARKER}"),
            },
        ];
        assert!(
            matches!(hit.next_step(&history).unwrap(), LlmStep::Call(r) if r.api == "Send_Email")
        );
        // Fires once.
        assert!(matches!(
            hit.next_step(&history).unwrap(),
            LlmStep::Say { .. }
        ));
    }

    #[test]
    fn assistant_output_does_not_trigger() {
        let script = vec![ScriptStep {
            when: "secret".into(),
            api: "Send_Email".into(),
            args: BTreeMap::new(),
        }];
        let mut adapter = ScriptedAdapter::new(script, "ok");
        let history = [
            user("hi"),
            HistoryItem::Assistant {
                step: LlmStep::Say {
                    text: "secret".into(),
                },
            },
        ];
        assert!(matches!(
            adapter.next_step(&history).unwrap(),
            LlmStep::Say { .. }
        ));
    }

    #[test]
    fn random_adapter_is_seeded() {
        let run = |seed| {
            let mut a = RandomAdapter::new(
                ChaCha20Rng::seed_from_u64(seed),
                vec!["A".into(), "B".into()],
                0.2,
            );
            (0..20)
                .map(|_| a.next_step(&[user("x")]).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
