//! HTTP front end for the gateway.
//!
//! | Method | Path                  | Body                  |
//! |--------|-----------------------|-----------------------|
//! | POST   | `/v1/chat`            | `{"user_input": ...}` |
//! | POST   | `/v1/challenge/{id}`  | `{"elevated_input": ...}` |
//! | GET    | `/v1/policy`          |                       |
//! | GET    | `/v1/health`          |                       |
//!
//! A chat whose token fails verification still runs (or aborts) per the
//! gateway's failure mode and answers 422 with the full body.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use encprompt_core::gateway::{
    ChallengeId, Gateway, GatewayError, LlmAdapter, Session, ToolExecutor, Transcript,
    VerificationOutcome,
};
use encprompt_core::policy::Decision;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapters::AdapterFactory;

pub type ExecutorFactory = Arc<dyn Fn() -> Box<dyn ToolExecutor + Send> + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    pub gateway: Arc<Gateway>,
    pub adapters: AdapterFactory,
    pub executors: ExecutorFactory,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub user_input: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengeRequest {
    pub elevated_input: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PendingChallengeView {
    pub id: ChallengeId,
    pub api: String,
    pub hint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub verification_outcome: VerificationOutcome,
    pub suspicious_delimiters: bool,
    pub transcript: Transcript,
    pub pending_challenges: Vec<PendingChallengeView>,
    /// Set when the model hit the step budget before answering.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChallengeResponse {
    pub decision: Decision,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn bad_body(rejection: JsonRejection) -> Response {
    error(StatusCode::BAD_REQUEST, rejection.body_text())
}

fn chat_response(session: Session, truncated: bool) -> Response {
    let status = if session.outcome.is_valid() {
        StatusCode::OK
    } else {
        StatusCode::UNPROCESSABLE_ENTITY
    };
    let body = ChatResponse {
        session_id: session.id.to_string(),
        verification_outcome: session.outcome,
        suspicious_delimiters: session.suspicious_delimiters,
        pending_challenges: session
            .pending
            .iter()
            .map(|(id, p)| PendingChallengeView {
                id: *id,
                api: p.request.api.clone(),
                hint: p.hint.clone(),
            })
            .collect(),
        transcript: session.transcript,
        truncated,
    };
    (status, Json(body)).into_response()
}

async fn chat(
    State(state): State<AppState>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(e) => return bad_body(e),
    };
    let result = tokio::task::spawn_blocking(move || {
        let mut adapter = (state.adapters)();
        let mut executor = (state.executors)();
        state.gateway.handle_input(
            &request.user_input,
            &mut *adapter as &mut dyn LlmAdapter,
            &mut *executor as &mut dyn ToolExecutor,
        )
    })
    .await;
    match result {
        Ok(Ok(session)) => {
            tracing::info!(session = %session.id, outcome = %session.outcome, steps = session.transcript.entries().len(), "chat");
            chat_response(session, false)
        }
        Ok(Err(GatewayError::StepBudgetExceeded { session, .. })) => {
            tracing::warn!(session = %session.id, "step budget exceeded");
            chat_response(*session, true)
        }
        Ok(Err(GatewayError::Adapter(e))) => error(StatusCode::BAD_GATEWAY, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn challenge(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ChallengeRequest>, JsonRejection>,
) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(e) => return bad_body(e),
    };
    let Ok(id) = id.parse::<ChallengeId>() else {
        return error(StatusCode::NOT_FOUND, "unknown challenge");
    };
    let result = tokio::task::spawn_blocking(move || {
        let mut executor = (state.executors)();
        state.gateway.resolve_challenge(
            &id,
            &request.elevated_input,
            &mut *executor as &mut dyn ToolExecutor,
        )
    })
    .await;
    match result {
        Ok(Ok(decision)) => {
            tracing::info!(challenge = %id, decision = decision.label(), "challenge");
            Json(ChallengeResponse { decision }).into_response()
        }
        Ok(Err(GatewayError::UnknownChallenge(_))) => {
            error(StatusCode::NOT_FOUND, "unknown challenge")
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Registry summary; no key material.
pub fn policy_summary(gateway: &Gateway) -> Value {
    let registry = gateway.registry();
    let apis: Vec<Value> = registry
        .apis()
        .iter()
        .map(|api| {
            json!({
                "name": api.name,
                "kind": api.kind,
                "required": {
                    "min_level": api.required.min_level,
                    "capability_index": api.required.capability_index,
                },
                "on_deny": api.on_deny,
                "on_deny_external": api.on_deny_external,
            })
        })
        .collect();
    let graphs: serde_json::Map<String, Value> = registry
        .graphs()
        .iter()
        .map(|(id, g)| {
            let transitions: Vec<Value> = g
                .transitions()
                .map(|t| json!({"from": t.from, "api": t.api, "to": t.to}))
                .collect();
            (
                id.clone(),
                json!({
                    "start": g.start(),
                    "states": g.states().collect::<Vec<_>>(),
                    "transitions": transitions,
                }),
            )
        })
        .collect();
    json!({
        "max_level": registry.max_level(),
        "apis": apis,
        "graphs": graphs,
        "failure_mode": gateway.config().failure_mode,
        "step_budget": gateway.config().step_budget,
    })
}

async fn policy(State(state): State<AppState>) -> Json<Value> {
    Json(policy_summary(&state.gateway))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "sessions": state.gateway.session_count(),
        "nonces": state.gateway.nonces().len(),
    }))
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/challenge/{id}", post(challenge))
        .route("/v1/policy", get(policy))
        .route("/v1/health", get(health))
        .fallback(not_found)
        .with_state(state)
}
