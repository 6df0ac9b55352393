use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::step::{ActionRequest, LlmStep};
use super::VerificationOutcome;
use crate::policy::{Decision, Permission, SessionPolicyState};

macro_rules! hex_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; 16]);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                for b in self.0 {
                    write!(f, "{b:02x}")?;
                }
                Ok(())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({self})", stringify!($name))
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                if s.len() != 32 || !s.is_ascii() {
                    return Err(format!("expected 32 hex digits, got {s:?}"));
                }
                let mut out = [0u8; 16];
                for (i, byte) in out.iter_mut().enumerate() {
                    *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                        .map_err(|_| format!("invalid hex in {s:?}"))?;
                }
                Ok(Self(out))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(
    /// Random 128-bit session identifier, hex encoded.
    SessionId
);
hex_id!(
    /// Random 128-bit challenge identifier, hex encoded.
    ChallengeId
);

/// One processed model step. Field order is the serialized order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub step: LlmStep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub challenge: Option<ChallengeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript(pub Vec<TranscriptEntry>);

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.0
    }

    /// `(api, decision)` for every call step, in order.
    pub fn decisions(&self) -> impl Iterator<Item = (&str, &Decision)> {
        self.0.iter().filter_map(|e| match (&e.step, &e.decision) {
            (LlmStep::Call(req), Some(d)) => Some((req.api.as_str(), d)),
            _ => None,
        })
    }

    /// Calls that were handed to the executor.
    pub fn executed(&self) -> impl Iterator<Item = &ActionRequest> {
        self.0.iter().filter_map(|e| match (&e.step, &e.decision) {
            (LlmStep::Call(req), Some(Decision::Execute)) => Some(req),
            _ => None,
        })
    }

    /// One JSON object per line, for golden files.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.0 {
            out.push_str(&serde_json::to_string(entry).expect("transcript entries serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PendingChallenge {
    pub request: ActionRequest,
    pub hint: String,
    /// Failed resolution attempts, oldest first.
    pub attempts: Vec<Decision>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResolvedChallenge {
    pub request: ActionRequest,
    pub observation: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Session {
    pub id: SessionId,
    pub outcome: VerificationOutcome,
    pub suspicious_delimiters: bool,
    /// Permission of the verified token, if verification succeeded.
    pub permission: Option<Permission>,
    pub policy_state: SessionPolicyState,
    pub transcript: Transcript,
    pub pending: BTreeMap<ChallengeId, PendingChallenge>,
    pub resolved: BTreeMap<ChallengeId, ResolvedChallenge>,
    pub expires_at: u64,
}

#[derive(Default)]
struct StoreInner {
    sessions: HashMap<SessionId, Arc<Mutex<Session>>>,
    challenges: HashMap<ChallengeId, SessionId>,
}

/// Sessions kept for challenge resolution until they expire.
#[derive(Default)]
pub(crate) struct SessionStore {
    inner: Mutex<StoreInner>,
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionStore {
    pub(crate) fn insert(&self, session: Session, now: u64) {
        let mut inner = lock(&self.inner);
        prune(&mut inner, now);
        let id = session.id;
        for challenge in session.pending.keys() {
            inner.challenges.insert(*challenge, id);
        }
        inner.sessions.insert(id, Arc::new(Mutex::new(session)));
    }

    pub(crate) fn get(&self, id: &SessionId) -> Option<Arc<Mutex<Session>>> {
        lock(&self.inner).sessions.get(id).cloned()
    }

    pub(crate) fn by_challenge(&self, id: &ChallengeId) -> Option<Arc<Mutex<Session>>> {
        let inner = lock(&self.inner);
        let session = inner.challenges.get(id)?;
        inner.sessions.get(session).cloned()
    }

    pub(crate) fn remove(&self, id: &SessionId) {
        let mut inner = lock(&self.inner);
        inner.sessions.remove(id);
        inner.challenges.retain(|_, s| s != id);
    }

    pub(crate) fn len(&self) -> usize {
        lock(&self.inner).sessions.len()
    }
}

fn prune(inner: &mut StoreInner, now: u64) {
    let expired: Vec<SessionId> = inner
        .sessions
        .iter()
        .filter(|(_, s)| lock(s).expires_at <= now)
        .map(|(id, _)| *id)
        .collect();
    if expired.is_empty() {
        return;
    }
    for id in &expired {
        inner.sessions.remove(id);
    }
    inner.challenges.retain(|_, s| !expired.contains(s));
}
