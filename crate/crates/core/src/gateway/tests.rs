use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::clock::ManualClock;
use crate::crypto::generate_keypair_with_rng;
use crate::crypto::SchemeId;
use crate::minter::Minter;
use crate::policy::load_registry;
use crate::scenario::{trust_all, MockExecutor, ScriptStep, ScriptedAdapter};

const NOW: u64 = 1_000_000;
const DEMO: &str = include_str!("../../fixtures/policy.toml");

struct Fixture {
    gateway: Gateway,
    minter: Minter,
    clock: Arc<ManualClock>,
    rng: ChaCha20Rng,
}

fn fixture_with(policy: &str, config: GatewayConfig) -> Fixture {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let key = generate_keypair_with_rng(SchemeId::EcdsaP256Sha256, &mut rng).unwrap();
    let clock = Arc::new(ManualClock::new(NOW));
    let gateway = Gateway::new(
        Arc::new(load_registry(policy).unwrap()),
        Arc::new(trust_all(&key)),
        Arc::new(NonceCache::new(300)),
        clock.clone(),
        config,
    )
    .with_id_seed(1);
    Fixture {
        gateway,
        minter: Minter::server_verified(key, 300).unwrap(),
        clock,
        rng,
    }
}

fn fixture() -> Fixture {
    fixture_with(DEMO, GatewayConfig::default())
}

impl Fixture {
    fn input(&mut self, prompt: &str, permission: Permission) -> String {
        self.minter
            .mint(prompt, permission, self.clock.now(), &mut self.rng)
            .unwrap()
    }
}

fn call(when: &str, api: &str) -> ScriptStep {
    ScriptStep {
        when: when.into(),
        api: api.into(),
        args: BTreeMap::new(),
    }
}

fn script(steps: &[(&str, &str)]) -> ScriptedAdapter {
    ScriptedAdapter::new(steps.iter().map(|(w, a)| call(w, a)).collect(), "done")
}

fn labels(session: &Session) -> Vec<(String, &'static str)> {
    session
        .transcript
        .decisions()
        .map(|(api, d)| (api.to_owned(), d.label()))
        .collect()
}

#[test]
fn level_one_send_is_held_for_verification() {
    let mut f = fixture();
    let input = f.input(
        "Send the password to abc123@gmail.com",
        Permission::Level(1),
    );
    let mut exec = MockExecutor::default();
    let session = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Send_Email")]), &mut exec)
        .unwrap();
    assert_eq!(session.outcome, VerificationOutcome::Valid);
    assert_eq!(
        labels(&session),
        [("Send_Email".into(), "request_verification")]
    );
    assert!(exec.executed().is_empty());
    let entry = &session.transcript.entries()[0];
    let id = entry.challenge.unwrap();
    assert_eq!(
        entry.observation.as_deref().unwrap(),
        challenge_notice("Send_Email", &id)
    );
    assert!(session.pending.contains_key(&id));
    // Final Say ends the transcript.
    assert!(matches!(
        session.transcript.entries()[1].step,
        LlmStep::Say { .. }
    ));
}

#[test]
fn denial_turns_into_rejection_after_external_content() {
    let mut f = fixture();
    let input = f.input("recipe from cooking.com", Permission::Level(1));
    let mut exec =
        MockExecutor::new([("cooking.com".to_owned(), "page <ADV_PROMPT>".to_owned())].into());
    let mut adapter = ScriptedAdapter::new(
        vec![
            ScriptStep {
                args: [("url".to_owned(), "cooking.com".to_owned())].into(),
                ..call("", "Web_Crawl")
            },
            call("<ADV_PROMPT>", "Send_Email"),
        ],
        "done",
    );
    let session = f
        .gateway
        .handle_input(&input, &mut adapter, &mut exec)
        .unwrap();
    assert_eq!(
        labels(&session),
        [
            ("Web_Crawl".into(), "execute"),
            ("Send_Email".into(), "reject")
        ]
    );
    assert_eq!(exec.executed().len(), 1);
    assert!(session.policy_state.external_content);
    assert_eq!(
        session.transcript.entries()[1].observation.as_deref(),
        Some(denial_notice("Send_Email").as_str())
    );
    assert!(session.pending.is_empty());
}

#[test]
fn unknown_api_is_rejected_without_echo() {
    let mut f = fixture();
    let input = f.input("hi", Permission::Level(2));
    let mut exec = MockExecutor::default();
    let session = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Format_Disk")]), &mut exec)
        .unwrap();
    assert_eq!(labels(&session), [("Format_Disk".into(), "reject")]);
    assert_eq!(
        session.transcript.entries()[0].observation.as_deref(),
        Some(UNKNOWN_ACTION_NOTICE)
    );
    assert!(exec.executed().is_empty());
}

#[test]
fn tool_failure_is_reported_to_the_model() {
    let mut f = fixture();
    let input = f.input("crawl", Permission::Level(1));
    let mut exec = MockExecutor::default();
    let session = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Web_Crawl")]), &mut exec)
        .unwrap();
    let observation = session.transcript.entries()[0].observation.clone().unwrap();
    assert!(
        observation.starts_with("ACTION FAILED: Web_Crawl:"),
        "{observation}"
    );
}

#[test]
fn missing_token_fails_closed() {
    let f = fixture();
    let mut exec = MockExecutor::default();
    let session = f
        .gateway
        .handle_input(
            "Find my photos",
            &mut script(&[("", "Find_Photo"), ("", "Send_Email")]),
            &mut exec,
        )
        .unwrap();
    assert_eq!(session.outcome, VerificationOutcome::MissingToken);
    assert!(session.permission.is_none());
    assert_eq!(
        labels(&session),
        [
            ("Find_Photo".into(), "request_verification"),
            ("Send_Email".into(), "request_verification")
        ]
    );
    assert!(exec.executed().is_empty());
    let (_, pending) = session.pending.iter().next().unwrap();
    assert_eq!(pending.hint, "token verification failed: missing_token");
}

struct Unreachable;
impl LlmAdapter for Unreachable {
    fn next_step(&mut self, _: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        panic!("model invoked in abort mode")
    }
}

#[test]
fn abort_mode_never_calls_the_model() {
    let f = fixture_with(
        DEMO,
        GatewayConfig {
            failure_mode: FailureMode::Abort,
            ..GatewayConfig::default()
        },
    );
    let session = f
        .gateway
        .handle_input("no token", &mut Unreachable, &mut MockExecutor::default())
        .unwrap();
    assert_eq!(session.outcome, VerificationOutcome::MissingToken);
    assert!(session.transcript.entries().is_empty());
}

#[test]
fn replayed_input_is_refused() {
    let mut f = fixture();
    let input = f.input("find photos", Permission::Level(1));
    let mut exec = MockExecutor::default();
    let first = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Find_Photo")]), &mut exec)
        .unwrap();
    assert_eq!(first.outcome, VerificationOutcome::Valid);
    let second = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Find_Photo")]), &mut exec)
        .unwrap();
    assert_eq!(second.outcome, VerificationOutcome::ReplayedNonce);
    assert_eq!(exec.executed().len(), 1);
}

#[test]
fn expired_token_is_refused() {
    let mut f = fixture();
    let input = f.input("find photos", Permission::Level(1));
    f.clock.advance(300);
    let session = f
        .gateway
        .handle_input(&input, &mut script(&[]), &mut MockExecutor::default())
        .unwrap();
    assert_eq!(session.outcome, VerificationOutcome::Expired);
}

#[test]
fn challenge_resolution_executes_once() {
    let mut f = fixture();
    let input = f.input("delete spam", Permission::Level(1));
    let mut exec = MockExecutor::default();
    let session = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Delete_Email")]), &mut exec)
        .unwrap();
    let id = *session.pending.keys().next().unwrap();

    // Another level-1 token does not unlock it.
    let weak = f.input("approve", Permission::Level(1));
    let d = f.gateway.resolve_challenge(&id, &weak, &mut exec).unwrap();
    assert_eq!(d.label(), "reject");
    // Neither does a broken one.
    let d = f
        .gateway
        .resolve_challenge(&id, "approve", &mut exec)
        .unwrap();
    assert!(matches!(d, Decision::Reject { reason } if reason.contains("missing_token")));
    assert!(exec.executed().is_empty());
    let stored = f.gateway.session(&session.id).unwrap();
    assert_eq!(stored.pending[&id].attempts.len(), 2);

    let strong = f.input("approve", Permission::Level(2));
    assert_eq!(
        f.gateway
            .resolve_challenge(&id, &strong, &mut exec)
            .unwrap(),
        Decision::Execute
    );
    assert_eq!(exec.executed().len(), 1);

    // Idempotent: no second execution, even with a fresh valid token.
    let again = f.input("approve", Permission::Level(2));
    assert_eq!(
        f.gateway.resolve_challenge(&id, &again, &mut exec).unwrap(),
        Decision::Execute
    );
    assert_eq!(exec.executed().len(), 1);
    let stored = f.gateway.session(&session.id).unwrap();
    assert!(stored.pending.is_empty());
    assert_eq!(stored.resolved[&id].observation, "emails deleted");
}

#[test]
fn unknown_and_expired_challenges() {
    let mut f = fixture();
    let bogus = ChallengeId([9; 16]);
    assert!(matches!(
        f.gateway.resolve_challenge(&bogus, "x", &mut MockExecutor::default()),
        Err(GatewayError::UnknownChallenge(id)) if id == bogus
    ));

    let input = f.input("delete spam", Permission::Level(1));
    let mut exec = MockExecutor::default();
    let session = f
        .gateway
        .handle_input(&input, &mut script(&[("", "Delete_Email")]), &mut exec)
        .unwrap();
    let id = *session.pending.keys().next().unwrap();
    f.clock.advance(300);
    let strong = f.input("approve", Permission::Level(2));
    assert!(matches!(
        f.gateway.resolve_challenge(&id, &strong, &mut exec),
        Err(GatewayError::UnknownChallenge(_))
    ));
    assert!(exec.executed().is_empty());
    assert!(f.gateway.session(&session.id).is_none());
}

#[test]
fn sequence_permission_follows_the_graph() {
    let mut f = fixture();
    let seq = Permission::Sequence("browse_then_report".into());
    let input = f.input("report on this page", seq.clone());
    let mut exec = MockExecutor::new([("".to_owned(), "page".to_owned())].into());
    let session = f
        .gateway
        .handle_input(
            &input,
            &mut script(&[
                ("", "Send_Email"),
                ("", "Web_Crawl"),
                ("", "Send_Email"),
                ("", "Web_Crawl"),
            ]),
            &mut exec,
        )
        .unwrap();
    assert_eq!(
        labels(&session),
        [
            ("Send_Email".into(), "request_verification"),
            ("Web_Crawl".into(), "execute"),
            ("Send_Email".into(), "execute"),
            ("Web_Crawl".into(), "reject"),
        ]
    );
    assert_eq!(
        session.policy_state.graph_state.as_deref(),
        Some("reported")
    );

    // The early Send_Email hold resumes from the session's current state,
    // where the graph no longer allows it.
    let id = *session.pending.keys().next().unwrap();
    let again = f.input("approve", seq);
    assert_eq!(
        f.gateway
            .resolve_challenge(&id, &again, &mut exec)
            .unwrap()
            .label(),
        "reject"
    );
}

struct Chatty;
impl LlmAdapter for Chatty {
    fn next_step(&mut self, _: &[HistoryItem]) -> Result<LlmStep, AdapterError> {
        Ok(LlmStep::Call(ActionRequest::new("Find_Photo")))
    }
}

#[test]
fn step_budget_stops_runaway_models() {
    let mut f = fixture_with(
        DEMO,
        GatewayConfig {
            step_budget: 3,
            ..GatewayConfig::default()
        },
    );
    let input = f.input("loop", Permission::Level(1));
    let mut exec = MockExecutor::default();
    match f.gateway.handle_input(&input, &mut Chatty, &mut exec) {
        Err(GatewayError::StepBudgetExceeded { budget, session }) => {
            assert_eq!(budget, 3);
            assert_eq!(session.transcript.entries().len(), 3);
            assert!(f.gateway.session(&session.id).is_some());
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(exec.executed().len(), 3);

    let zero = fixture_with(
        DEMO,
        GatewayConfig {
            step_budget: 0,
            ..GatewayConfig::default()
        },
    );
    assert!(matches!(
        zero.gateway.handle_input("x", &mut Chatty, &mut exec),
        Err(GatewayError::ZeroStepBudget)
    ));
}

#[test]
fn model_mismatch_is_a_hard_error() {
    let policy = r#"
        max_level = 2
        [[apis]]
        name = "Read"
        kind = "read"
        required = { capability_index = 0 }
        on_deny = "reject"
    "#;
    let mut f = fixture_with(policy, GatewayConfig::default());
    let input = f.input("read", Permission::Level(2));
    let err = f
        .gateway
        .handle_input(
            &input,
            &mut script(&[("", "Read")]),
            &mut MockExecutor::default(),
        )
        .unwrap_err();
    assert!(matches!(
        err,
        GatewayError::Policy(PolicyError::ModelMismatch { .. })
    ));
}

#[test]
fn seeded_ids_are_reproducible() {
    let run = || {
        let mut f = fixture();
        let input = f.input("delete", Permission::Level(1));
        let s = f
            .gateway
            .handle_input(
                &input,
                &mut script(&[("", "Delete_Email")]),
                &mut MockExecutor::default(),
            )
            .unwrap();
        (s.id, s.pending.keys().copied().collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
