//! Server-side enforcement.
//!
//! [`Gateway::handle_input`] verifies the token on a user input, then drives
//! the model one step at a time. Every tool call the model emits is checked
//! with [`policy::check`] under the verified permission; only `Execute`
//! decisions reach the [`ToolExecutor`]. Denials are fed back to the model as
//! fixed notices so it can explain the outcome to the user.

mod session;
mod step;
mod verify;

pub use session::{
    ChallengeId, PendingChallenge, ResolvedChallenge, Session, SessionId, Transcript,
    TranscriptEntry,
};
pub use step::{
    ActionRequest, AdapterError, HistoryItem, LlmAdapter, LlmStep, ToolError, ToolExecutor,
};
pub use verify::{verify_input, VerificationOutcome, VerifiedInput, VerifyContext};

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::crypto::{KeyRegistry, NonceCache};
use crate::policy::{self, Decision, Permission, PolicyError, Registry, SessionPolicyState};
use session::{lock, SessionStore};

/// Notice fed to the model when a call is refused.
pub fn denial_notice(api: &str) -> String {
    format!("ACTION DENIED: insufficient permission for {api}")
}

/// Notice for calls to APIs the registry does not declare. The name is not
/// echoed back because it is model output.
pub const UNKNOWN_ACTION_NOTICE: &str = "ACTION DENIED: unknown action";

pub fn challenge_notice(api: &str, challenge: &ChallengeId) -> String {
    format!("ACTION HELD: {api} requires additional user verification (challenge {challenge})")
}

pub fn failure_notice(api: &str, error: &ToolError) -> String {
    format!("ACTION FAILED: {api}: {error}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Run the model but hold every call for verification.
    #[default]
    RefuseAll,
    /// Do not invoke the model at all.
    Abort,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub failure_mode: FailureMode,
    pub step_budget: usize,
    pub accept_on_device: bool,
    /// Lifetime of sessions whose token did not verify.
    pub session_ttl: u64,
}

pub const DEFAULT_STEP_BUDGET: usize = 16;

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            failure_mode: FailureMode::RefuseAll,
            step_budget: DEFAULT_STEP_BUDGET,
            accept_on_device: false,
            session_ttl: 300,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("model did not finish within {budget} steps")]
    StepBudgetExceeded {
        budget: usize,
        session: Box<Session>,
    },
    #[error("step budget must be positive")]
    ZeroStepBudget,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("policy evaluation failed: {0}")]
    Policy(#[from] PolicyError),
    #[error("unknown challenge {0}")]
    UnknownChallenge(ChallengeId),
}

pub struct Gateway {
    registry: Arc<Registry>,
    keys: Arc<KeyRegistry>,
    nonces: Arc<NonceCache>,
    clock: Arc<dyn Clock>,
    config: GatewayConfig,
    sessions: SessionStore,
    ids: Mutex<ChaCha20Rng>,
}

impl Gateway {
    pub fn new(
        registry: Arc<Registry>,
        keys: Arc<KeyRegistry>,
        nonces: Arc<NonceCache>,
        clock: Arc<dyn Clock>,
        config: GatewayConfig,
    ) -> Self {
        Self {
            registry,
            keys,
            nonces,
            clock,
            config,
            sessions: SessionStore::default(),
            ids: Mutex::new(ChaCha20Rng::from_entropy()),
        }
    }

    /// Makes session and challenge ids reproducible.
    pub fn with_id_seed(self, seed: u64) -> Self {
        Self {
            ids: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            ..self
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn nonces(&self) -> &NonceCache {
        &self.nonces
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    fn fresh_id(&self) -> [u8; 16] {
        let mut id = [0u8; 16];
        lock(&self.ids).fill_bytes(&mut id);
        id
    }

    pub fn verify(&self, user_input: &str) -> VerifiedInput {
        verify_input(
            user_input,
            &VerifyContext {
                registry: &self.registry,
                keys: &self.keys,
                nonces: &self.nonces,
                now: self.clock.now(),
                accept_on_device: self.config.accept_on_device,
            },
        )
    }

    /// Verifies `user_input` and runs the gated step loop. The finished
    /// session is stored for later challenge resolution and returned.
    pub fn handle_input(
        &self,
        user_input: &str,
        adapter: &mut dyn LlmAdapter,
        executor: &mut dyn ToolExecutor,
    ) -> Result<Session, GatewayError> {
        if self.config.step_budget == 0 {
            return Err(GatewayError::ZeroStepBudget);
        }
        let verified = self.verify(user_input);
        let now = self.clock.now();
        let permission = verified.payload.as_ref().map(|p| p.permission.clone());
        let mut session = Session {
            id: SessionId(self.fresh_id()),
            outcome: verified.outcome,
            suspicious_delimiters: verified.parsed.suspicious_delimiters,
            policy_state: permission
                .as_ref()
                .map(|p| SessionPolicyState::initial(p, &self.registry))
                .unwrap_or_default(),
            permission,
            transcript: Transcript::default(),
            pending: BTreeMap::new(),
            resolved: BTreeMap::new(),
            expires_at: verified
                .payload
                .as_ref()
                .map_or(now.saturating_add(self.config.session_ttl), |p| {
                    p.expires_at
                }),
        };

        if !verified.outcome.is_valid() && self.config.failure_mode == FailureMode::Abort {
            self.sessions.insert(session.clone(), now);
            return Ok(session);
        }

        let mut history = vec![HistoryItem::User {
            text: verified.parsed.user_prompt,
        }];
        let result = self.run_loop(&mut session, &mut history, adapter, executor);
        self.sessions.insert(session.clone(), now);
        match result {
            Ok(true) => Ok(session),
            Ok(false) => Err(GatewayError::StepBudgetExceeded {
                budget: self.config.step_budget,
                session: Box::new(session),
            }),
            Err(e) => Err(e),
        }
    }

    /// Returns whether the model finished with a `Say`.
    fn run_loop(
        &self,
        session: &mut Session,
        history: &mut Vec<HistoryItem>,
        adapter: &mut dyn LlmAdapter,
        executor: &mut dyn ToolExecutor,
    ) -> Result<bool, GatewayError> {
        for index in 0..self.config.step_budget {
            let step = adapter.next_step(history)?;
            let request = match &step {
                LlmStep::Say { .. } => {
                    session.transcript.0.push(TranscriptEntry {
                        index,
                        step: step.clone(),
                        decision: None,
                        observation: None,
                        challenge: None,
                    });
                    history.push(HistoryItem::Assistant { step });
                    return Ok(true);
                }
                LlmStep::Call(request) => request.clone(),
            };

            let decision = self.decide(session, &request)?;
            let mut challenge = None;
            let observation = match &decision {
                Decision::Execute => {
                    let text = match executor.execute(&request) {
                        Ok(text) => text,
                        Err(e) => failure_notice(&request.api, &e),
                    };
                    session.policy_state.external_content = true;
                    text
                }
                Decision::Reject { .. } if self.registry.api(&request.api).is_none() => {
                    UNKNOWN_ACTION_NOTICE.to_owned()
                }
                Decision::Reject { .. } => denial_notice(&request.api),
                Decision::RequestVerification { hint } => {
                    let id = ChallengeId(self.fresh_id());
                    session.pending.insert(
                        id,
                        PendingChallenge {
                            request: request.clone(),
                            hint: hint.clone(),
                            attempts: Vec::new(),
                        },
                    );
                    challenge = Some(id);
                    challenge_notice(&request.api, &id)
                }
            };

            session.transcript.0.push(TranscriptEntry {
                index,
                step: step.clone(),
                decision: Some(decision),
                observation: Some(observation.clone()),
                challenge,
            });
            history.push(HistoryItem::Assistant { step });
            history.push(HistoryItem::Observation {
                api: request.api,
                text: observation,
            });
        }
        Ok(false)
    }

    /// Policy decision for one call; advances the session's policy state on
    /// allow.
    fn decide(
        &self,
        session: &mut Session,
        request: &ActionRequest,
    ) -> Result<Decision, GatewayError> {
        let Some(permission) = &session.permission else {
            return Ok(Decision::RequestVerification {
                hint: format!("token verification failed: {}", session.outcome),
            });
        };
        match policy::check(
            permission,
            &request.api,
            &session.policy_state,
            &self.registry,
        ) {
            Ok((decision, next)) => {
                session.policy_state = next;
                Ok(decision)
            }
            Err(PolicyError::UnknownApi(_)) => Ok(Decision::Reject {
                reason: "unknown api".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Retries a held call with a new, hopefully more privileged, input.
    ///
    /// Executes the held call iff the new input verifies and its permission
    /// allows the call. A challenge executes at most once; resolving it again
    /// returns `Execute` without re-running the tool.
    pub fn resolve_challenge(
        &self,
        challenge: &ChallengeId,
        elevated_input: &str,
        executor: &mut dyn ToolExecutor,
    ) -> Result<Decision, GatewayError> {
        let unknown = || GatewayError::UnknownChallenge(*challenge);
        let session = self.sessions.by_challenge(challenge).ok_or_else(unknown)?;
        let mut session = lock(&session);

        if self.clock.now() >= session.expires_at {
            let id = session.id;
            drop(session);
            self.sessions.remove(&id);
            return Err(unknown());
        }
        if session.resolved.contains_key(challenge) {
            return Ok(Decision::Execute);
        }
        let request = session
            .pending
            .get(challenge)
            .map(|p| p.request.clone())
            .ok_or_else(unknown)?;

        let verified = self.verify(elevated_input);
        let decision = match &verified.payload {
            None => Decision::Reject {
                reason: format!("elevated token verification failed: {}", verified.outcome),
            },
            Some(payload) => {
                let same_graph = matches!(
                    (&payload.permission, &session.permission),
                    (Permission::Sequence(a), Some(Permission::Sequence(b))) if a == b
                );
                let state = if same_graph {
                    session.policy_state.clone()
                } else {
                    SessionPolicyState::initial(&payload.permission, &self.registry)
                };
                match policy::check(&payload.permission, &request.api, &state, &self.registry) {
                    Ok((Decision::Execute, next)) => {
                        let observation = match executor.execute(&request) {
                            Ok(text) => text,
                            Err(e) => failure_notice(&request.api, &e),
                        };
                        if same_graph {
                            session.policy_state.graph_state = next.graph_state;
                        }
                        session.pending.remove(challenge);
                        session.resolved.insert(
                            *challenge,
                            ResolvedChallenge {
                                request,
                                observation,
                            },
                        );
                        return Ok(Decision::Execute);
                    }
                    Ok((Decision::Reject { reason }, _))
                    | Ok((Decision::RequestVerification { hint: reason }, _)) => {
                        Decision::Reject { reason }
                    }
                    Err(PolicyError::UnknownApi(_)) => Decision::Reject {
                        reason: "unknown api".into(),
                    },
                    Err(e) => return Err(e.into()),
                }
            }
        };
        if let Some(pending) = session.pending.get_mut(challenge) {
            pending.attempts.push(decision.clone());
        }
        Ok(decision)
    }

    pub fn session(&self, id: &SessionId) -> Option<Session> {
        self.sessions.get(id).map(|s| lock(&s).clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }
}

#[cfg(test)]
mod tests;
