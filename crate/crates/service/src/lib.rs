//! Operator tooling around `encprompt-core`: the `encprompt` CLI, the HTTP
//! gateway service, its configuration, and on-disk replay protection.

#![forbid(unsafe_code)]

pub mod adapters;
pub mod cli;
pub mod config;
pub mod http;
pub mod persist;

use std::collections::BTreeMap;
use std::sync::Arc;

use encprompt_core::clock::{Clock, SystemClock};
use encprompt_core::crypto::NonceCache;
use encprompt_core::gateway::{Gateway, ToolExecutor};
use encprompt_core::scenario::MockExecutor;

use crate::config::LoadedConfig;
use crate::http::{AppState, ExecutorFactory};

/// Process exit codes. Verification outcomes get their own codes so shell
/// scripts can branch on them.
pub mod exit {
    use encprompt_core::gateway::VerificationOutcome;

    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const SIMULATION_FAILED: i32 = 4;

    pub fn for_outcome(outcome: VerificationOutcome) -> i32 {
        match outcome {
            VerificationOutcome::Valid => OK,
            VerificationOutcome::InvalidSignature => 10,
            VerificationOutcome::UnregisteredKey => 11,
            VerificationOutcome::Expired => 12,
            VerificationOutcome::ReplayedNonce => 13,
            VerificationOutcome::MissingToken => 14,
            VerificationOutcome::Malformed => 15,
        }
    }
}

/// Executors hand out canned tool output, with `Web_Crawl` serving the
/// configured pages.
pub fn mock_executor_factory(pages: BTreeMap<String, String>) -> ExecutorFactory {
    let pages = Arc::new(pages);
    Arc::new(move || Box::new(MockExecutor::new((*pages).clone())) as Box<dyn ToolExecutor + Send>)
}

/// Wires a loaded config into router state around an already opened nonce
/// cache.
pub fn app_state(loaded: LoadedConfig, nonces: NonceCache, clock: Arc<dyn Clock>) -> AppState {
    let registry = Arc::new(loaded.registry);
    let gateway = Gateway::new(
        registry.clone(),
        Arc::new(loaded.keys),
        Arc::new(nonces),
        clock,
        loaded.config.gateway_config(),
    );
    AppState {
        gateway: Arc::new(gateway),
        adapters: adapters::adapter_factory(&loaded.config.adapter, loaded.script, registry),
        executors: mock_executor_factory(loaded.pages),
    }
}

/// Loads config and state and serves until interrupted.
pub async fn serve(
    loaded: LoadedConfig,
    listen: Option<std::net::SocketAddr>,
) -> anyhow::Result<()> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let nonces = persist::open_nonce_cache(
        &loaded.config.nonce_cache,
        loaded.config.nonce_horizon(),
        clock.now(),
    )?;
    let addr = listen.unwrap_or(loaded.config.listen);
    let app = http::router(app_state(loaded, nonces, clock));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
