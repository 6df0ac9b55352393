//! Deterministic automata over API names.

use std::collections::{BTreeMap, BTreeSet};

use crate::ident::is_identifier;

/// Which APIs may be called in which order within a session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceGraph {
    states: BTreeSet<String>,
    start: String,
    transitions: BTreeMap<(String, String), String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub from: String,
    pub api: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid state name {0:?}")]
    InvalidState(String),
    #[error("start state {0:?} is not declared")]
    UndeclaredStart(String),
    #[error("transition {from:?} --{api}--> {to:?} references undeclared state {state:?}")]
    DanglingState {
        from: String,
        api: String,
        to: String,
        state: String,
    },
    #[error("state {from:?} has more than one transition on {api}")]
    Nondeterministic { from: String, api: String },
    #[error("invalid api name {0:?}")]
    InvalidApi(String),
}

impl SequenceGraph {
    pub fn new(
        states: impl IntoIterator<Item = String>,
        start: impl Into<String>,
        transitions: impl IntoIterator<Item = Transition>,
    ) -> Result<Self, GraphError> {
        let states: BTreeSet<String> = states.into_iter().collect();
        if let Some(bad) = states.iter().find(|s| !is_identifier(s)) {
            return Err(GraphError::InvalidState(bad.clone()));
        }
        let start = start.into();
        if !states.contains(&start) {
            return Err(GraphError::UndeclaredStart(start));
        }
        let mut table = BTreeMap::new();
        for t in transitions {
            for endpoint in [&t.from, &t.to] {
                if !states.contains(endpoint) {
                    return Err(GraphError::DanglingState {
                        from: t.from.clone(),
                        api: t.api.clone(),
                        to: t.to.clone(),
                        state: endpoint.clone(),
                    });
                }
            }
            if !is_identifier(&t.api) {
                return Err(GraphError::InvalidApi(t.api));
            }
            if table
                .insert((t.from.clone(), t.api.clone()), t.to)
                .is_some()
            {
                return Err(GraphError::Nondeterministic {
                    from: t.from,
                    api: t.api,
                });
            }
        }
        Ok(Self {
            states,
            start,
            transitions: table,
        })
    }

    pub fn start(&self) -> &str {
        &self.start
    }

    pub fn states(&self) -> impl Iterator<Item = &str> {
        self.states.iter().map(String::as_str)
    }

    pub fn contains_state(&self, state: &str) -> bool {
        self.states.contains(state)
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.transitions.iter().map(|((from, api), to)| Transition {
            from: from.clone(),
            api: api.clone(),
            to: to.clone(),
        })
    }

    /// Successor of `state` on `api`, if the graph allows that call there.
    pub fn step(&self, state: &str, api: &str) -> Option<&str> {
        // BTreeMap<(String, String), _> cannot be probed with borrowed halves.
        self.transitions
            .get(&(state.to_owned(), api.to_owned()))
            .map(String::as_str)
    }

    /// True iff every call in `sequence` is allowed in turn, starting from the
    /// start state. The empty sequence is always accepted.
    pub fn run<S: AsRef<str>>(&self, sequence: &[S]) -> bool {
        let mut state = self.start.as_str();
        for api in sequence {
            match self.step(state, api.as_ref()) {
                Some(next) => state = next,
                None => return false,
            }
        }
        true
    }
}

/// Free-function form of [`SequenceGraph::run`].
pub fn graph_run<S: AsRef<str>>(graph: &SequenceGraph, sequence: &[S]) -> bool {
    graph.run(sequence)
}
