//! Permission tokens for LLM tool gating.
//!
//! A device derives the user's current permission from local signals, signs it
//! together with a digest of the prompt, and appends the resulting token to the
//! prompt text:
//!
//! ```text
//! <user prompt><D>base64url(payload).base64url(signature)</D>
//! ```
//!
//! The server strips and verifies the token before the prompt reaches the model,
//! then checks every tool call the model emits against the verified permission.
//! Calls outside that permission never reach a tool executor, regardless of what
//! text the model was fed.
//!
//! Module map:
//!
//! - [`token_format`]: payload encoding and the `<D>…</D>` text envelope.
//! - [`crypto`]: signature schemes, the server-side key registry, replay cache.
//! - [`policy`]: permission models (levels, capability bits, sequence graphs)
//!   and the per-call decision engine.
//! - [`minter`]: device-side permission rules and token minting.
//! - [`gateway`]: server-side verification and the gated step loop.
//! - [`scenario`]: scripted threat scenarios and the adversarial fuzzer.

#![forbid(unsafe_code)]

pub mod clock;
pub mod crypto;
pub mod gateway;
pub mod minter;
pub mod policy;
pub mod scenario;
pub mod token_format;

mod ident;

pub use clock::{Clock, ManualClock, SystemClock};
pub use crypto::{KeyPair, KeyRegistry, NonceCache, PublicKey, SchemeId};
pub use gateway::{Gateway, GatewayConfig, VerificationOutcome};
pub use policy::{Decision, Permission, Registry};
pub use token_format::{EncodedToken, ParsedInput, TokenPayload};
