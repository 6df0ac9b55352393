//! Reference policy used to audit the gateway. It reads the registry's raw
//! tables and shares no code with the decision engine.

use crate::policy::{Permission, Registry};

pub struct PolicyOracle<'a> {
    registry: &'a Registry,
}

impl<'a> PolicyOracle<'a> {
    pub fn new(registry: &'a Registry) -> Self {
        Self { registry }
    }

    /// Graph state a fresh session starts in.
    pub fn start_state(&self, permission: &Permission) -> Option<String> {
        match permission {
            Permission::Sequence(id) => self
                .registry
                .graphs()
                .iter()
                .find(|(gid, _)| *gid == id)
                .map(|(_, g)| g.start().to_owned()),
            _ => None,
        }
    }

    /// Whether `api` is sanctioned, and the graph state afterwards.
    pub fn permits(
        &self,
        permission: &Permission,
        api: &str,
        state: Option<&str>,
    ) -> (bool, Option<String>) {
        let Some(spec) = self.registry.apis().iter().find(|s| s.name == api) else {
            return (false, state.map(str::to_owned));
        };
        let unchanged = state.map(str::to_owned);
        match permission {
            Permission::Level(level) => {
                let ok = *level >= 1
                    && *level <= self.registry.max_level()
                    && spec.required.min_level.is_some_and(|m| *level >= m);
                (ok, unchanged)
            }
            Permission::Capabilities(bits) => {
                let bits = bits.as_slice();
                let ok = bits.len() == self.registry.apis().len()
                    && spec
                        .required
                        .capability_index
                        .is_some_and(|i| i < bits.len() && bits[i]);
                (ok, unchanged)
            }
            Permission::Sequence(id) => {
                let Some((_, graph)) = self.registry.graphs().iter().find(|(gid, _)| *gid == id)
                else {
                    return (false, unchanged);
                };
                let current = state.unwrap_or(graph.start());
                let next = graph
                    .transitions()
                    .find(|t| t.from == current && t.api == api)
                    .map(|t| t.to);
                match next {
                    Some(to) => (true, Some(to)),
                    None => (false, unchanged),
                }
            }
        }
    }
}
