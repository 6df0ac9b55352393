//! `encprompt` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{self, IsTerminal, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use clap::{Parser, Subcommand, ValueEnum};
use encprompt_core::clock::{Clock, SystemClock};
use encprompt_core::crypto::{
    generate_keypair, KeyFile, KeyRegistry, NonceCache, RegistryFile, SchemeId,
};
use encprompt_core::gateway::{verify_input, VerifyContext};
use encprompt_core::minter::{DeviceStatus, Minter, RuleSet, DEFAULT_TTL};
use encprompt_core::scenario::{
    fuzz_adversary_with, load_policy, run_all, DirFixtures, EmbeddedFixtures, FixtureSource,
    FuzzOptions,
};
use encprompt_core::token_format::{extract, Mode};
use rand::rngs::OsRng;
use serde_json::json;

use crate::config::{self, load_key_registry, load_policy_file, CONFIG_ENV, LISTEN_ENV};
use crate::exit;
use crate::persist::open_nonce_cache;

#[derive(Parser, Debug)]
#[command(
    name = "encprompt",
    version,
    about = "Mint, verify and enforce permission tokens on LLM prompts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MintMode {
    Server,
    OnDevice,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a signing key; writes <OUT>.pub and <OUT>.key.
    Keygen {
        #[arg(long, default_value = "ecdsa-p256-sha256")]
        scheme: SchemeId,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a public key to a key registry file, creating it if needed.
    Register {
        #[arg(long)]
        registry: PathBuf,
        /// Public key file written by `keygen`.
        #[arg(long)]
        key: PathBuf,
        /// `level:<n>`, `capabilities:<bits>`, `sequence:<graph>`, `<model>:*` or `*`.
        #[arg(long)]
        class: String,
    },
    /// Derive a permission from device status and append a token to the prompt.
    Mint {
        #[arg(long)]
        rules: PathBuf,
        /// Device status TOML.
        #[arg(long)]
        status: PathBuf,
        /// Private key file; required in server mode.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "server")]
        mode: MintMode,
        #[arg(long, default_value_t = DEFAULT_TTL)]
        ttl: u64,
        /// Prompt text; read from stdin when absent.
        #[arg(long)]
        prompt: Option<String>,
        /// Unix time to mint at instead of the system clock.
        #[arg(long)]
        now: Option<u64>,
    },
    /// Decode a token without verifying it.
    Inspect {
        /// User input; read from stdin when absent.
        input: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Run full server-side verification and print the outcome.
    Verify {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Nonce journal; without it replays are only caught within one run.
        #[arg(long)]
        nonce_cache: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TTL)]
        nonce_horizon: u64,
        #[arg(long)]
        accept_on_device: bool,
        #[arg(long)]
        now: Option<u64>,
        /// User input; read from stdin when absent.
        input: Option<String>,
    },
    /// Start the HTTP gateway.
    Serve {
        #[arg(long, env = CONFIG_ENV)]
        config: PathBuf,
        #[arg(long, env = LISTEN_ENV)]
        listen: Option<SocketAddr>,
    },
    /// Run the scenario suite, optionally followed by the fuzzer.
    Simulate {
        /// Fixture directory; the built-in fixtures when absent.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Fuzz episodes to run after the scenarios.
        #[arg(long)]
        fuzz: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Validate a policy file.
    PolicyCheck { policy: PathBuf },
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(e: impl ToString) -> Self {
        Self {
            code: exit::CONFIG,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl ToString) -> Self {
        Self {
            code: exit::RUNTIME,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::Keygen {
            scheme,
            out: prefix,
        } => keygen(scheme, &prefix, out),
        Command::Register {
            registry,
            key,
            class,
        } => register(&registry, &key, class, out),
        Command::Mint {
            rules,
            status,
            key,
            mode,
            ttl,
            prompt,
            now,
        } => mint(&rules, &status, key.as_deref(), mode, ttl, prompt, now, out),
        Command::Inspect { input, json } => inspect(input, json, out),
        Command::Verify {
            policy,
            registry,
            nonce_cache,
            nonce_horizon,
            accept_on_device,
            now,
            input,
        } => verify(
            &policy,
            &registry,
            nonce_cache.as_deref(),
            nonce_horizon,
            accept_on_device,
            now,
            input,
            out,
        ),
        Command::Serve { config, listen } => serve(&config, listen),
        Command::Simulate {
            fixtures,
            fuzz,
            seed,
            json,
        } => simulate(fixtures, fuzz, seed, json, out),
        Command::PolicyCheck { policy } => policy_check(&policy, out),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(Failure::runtime)
}

/// `arg`, or all of stdin minus one trailing newline.
fn text_or_stdin(arg: Option<String>) -> Result<String, Failure> {
    if let Some(text) = arg {
        return Ok(text);
    }
    let mut text = String::new();
    io::stdin()
        .read_to_string(&mut text)
        .map_err(Failure::runtime)?;
    if text.ends_with('\n') {
        text.pop();
        if text.ends_with('\r') {
            text.pop();
        }
    }
    Ok(text)
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn key_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    (with(".pub"), with(".key"))
}

fn keygen(scheme: SchemeId, prefix: &Path, out: &mut dyn Write) -> Outcome {
    let key = generate_keypair(scheme).map_err(Failure::config)?;
    let now = SystemClock.now();
    let (public_path, private_path) = key_paths(prefix);
    fs::write(&public_path, KeyFile::public(&key, now).to_toml()).map_err(Failure::runtime)?;
    write_private(&private_path, &KeyFile::private(&key, now).to_toml())?;
    write_out(
        out,
        &format!("{}\n{}\n", public_path.display(), private_path.display()),
    )?;
    Ok(exit::OK)
}

#[cfg(unix)]
fn write_private(path: &Path, text: &str) -> Result<(), Failure> {
    use std::os::unix::fs::OpenOptionsExt;
    let mut file = fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)
        .map_err(Failure::runtime)?;
    file.write_all(text.as_bytes()).map_err(Failure::runtime)
}

#[cfg(not(unix))]
fn write_private(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(Failure::runtime)
}

fn register(registry: &Path, key: &Path, class: String, out: &mut dyn Write) -> Outcome {
    let key = KeyFile::parse(&read_file(key)?)
        .and_then(|k| k.to_public_key())
        .map_err(Failure::config)?;
    let mut keys = if registry.exists() {
        load_key_registry(registry).map_err(Failure::config)?
    } else {
        KeyRegistry::new()
    };
    keys.register(class.clone(), key.bytes);
    fs::write(registry, RegistryFile::from_registry(&keys).to_toml()).map_err(Failure::runtime)?;
    write_out(out, &format!("registered {} for {class}\n", key.scheme))?;
    Ok(exit::OK)
}

#[allow(clippy::too_many_arguments)]
fn mint(
    rules: &Path,
    status: &Path,
    key: Option<&Path>,
    mode: MintMode,
    ttl: u64,
    prompt: Option<String>,
    now: Option<u64>,
    out: &mut dyn Write,
) -> Outcome {
    let rules = RuleSet::parse(&read_file(rules)?).map_err(Failure::config)?;
    let status: DeviceStatus = toml::from_str(&read_file(status)?)
        .map_err(|e| Failure::config(format!("{}: {e}", status.display())))?;
    let minter = match (mode, key) {
        (MintMode::Server, Some(key)) => {
            let key = KeyFile::parse(&read_file(key)?)
                .and_then(|k| k.to_keypair())
                .map_err(Failure::config)?;
            Minter::server_verified(key, ttl)
        }
        (MintMode::Server, None) => return Err(Failure::config("server mode needs --key")),
        (MintMode::OnDevice, _) => Minter::on_device(ttl),
    }
    .map_err(Failure::config)?;
    let prompt = text_or_stdin(prompt)?;
    let now = now.unwrap_or_else(|| SystemClock.now());
    let mut status = status;
    if status.now == 0 {
        status.now = now;
    }
    let permission = rules.derive(&status);
    let input = minter
        .mint(&prompt, permission, now, &mut OsRng)
        .map_err(Failure::runtime)?;
    write_out(out, &format!("{input}\n"))?;
    Ok(exit::OK)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::ServerVerified => "server_verified",
        Mode::OnDevice => "on_device",
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn inspect(input: Option<String>, as_json: bool, out: &mut dyn Write) -> Outcome {
    let input = text_or_stdin(input)?;
    let parsed = extract(&input);
    let Some(token) = parsed.token else {
        return Err(Failure {
            code: exit::for_outcome(encprompt_core::VerificationOutcome::MissingToken),
            message: "no token at the end of the input".into(),
        });
    };
    let malformed = |e: &dyn std::fmt::Display| Failure {
        code: exit::for_outcome(encprompt_core::VerificationOutcome::Malformed),
        message: format!("token does not decode: {e}"),
    };
    let payload = token.decode_payload().map_err(|e| malformed(&e))?;
    let signature = token.signature_bytes().map_err(|e| malformed(&e))?;
    let signer = payload
        .signer
        .as_ref()
        .map(|k| (k.scheme.name(), URL_SAFE_NO_PAD.encode(&k.bytes)));
    let text = if as_json {
        let value = json!({
            "prompt": parsed.user_prompt,
            "suspicious_delimiters": parsed.suspicious_delimiters,
            "version": payload.version,
            "mode": payload.mode(),
            "permission": payload.permission,
            "signer": signer.as_ref().map(|(s, k)| json!({"scheme": s, "public_key": k})),
            "prompt_hash": hex(&payload.prompt_hash),
            "nonce": hex(&payload.nonce),
            "issued_at": payload.issued_at,
            "expires_at": payload.expires_at,
            "signature_len": signature.len(),
        });
        format!(
            "{}\n",
            serde_json::to_string_pretty(&value).map_err(Failure::runtime)?
        )
    } else {
        let signer = signer.map_or_else(|| "none".to_owned(), |(s, k)| format!("{s} {k}"));
        format!(
            "prompt: {:?}\nsuspicious_delimiters: {}\nversion: {}\nmode: {}\npermission: {}\nsigner: {signer}\nprompt_hash: {}\nnonce: {}\nissued_at: {}\nexpires_at: {}\nsignature: {} bytes\n",
            parsed.user_prompt,
            parsed.suspicious_delimiters,
            payload.version,
            mode_name(payload.mode()),
            payload.permission,
            hex(&payload.prompt_hash),
            hex(&payload.nonce),
            payload.issued_at,
            payload.expires_at,
            signature.len(),
        )
    };
    write_out(out, &text)?;
    Ok(exit::OK)
}

#[allow(clippy::too_many_arguments)]
fn verify(
    policy: &Path,
    registry: &Path,
    nonce_cache: Option<&Path>,
    horizon: u64,
    accept_on_device: bool,
    now: Option<u64>,
    input: Option<String>,
    out: &mut dyn Write,
) -> Outcome {
    let policy = load_policy_file(policy).map_err(Failure::config)?;
    let keys = load_key_registry(registry).map_err(Failure::config)?;
    let now = now.unwrap_or_else(|| SystemClock.now());
    let nonces = match nonce_cache {
        Some(path) => open_nonce_cache(path, horizon, now).map_err(Failure::runtime)?,
        None => NonceCache::new(horizon),
    };
    let input = text_or_stdin(input)?;
    let verified = verify_input(
        &input,
        &VerifyContext {
            registry: &policy,
            keys: &keys,
            nonces: &nonces,
            now,
            accept_on_device,
        },
    );
    let mut line = verified.outcome.to_string();
    if let Some(payload) = &verified.payload {
        line.push_str(&format!(" permission={}", payload.permission));
    }
    if verified.parsed.suspicious_delimiters {
        line.push_str(" suspicious_delimiters");
    }
    write_out(out, &format!("{line}\n"))?;
    Ok(exit::for_outcome(verified.outcome))
}

fn serve(config_path: &Path, listen: Option<SocketAddr>) -> Outcome {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .try_init();
    let loaded = config::load(config_path).map_err(Failure::config)?;
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    runtime
        .block_on(crate::serve(loaded, listen))
        .map_err(Failure::runtime)?;
    Ok(exit::OK)
}

fn simulate(
    fixtures: Option<PathBuf>,
    fuzz: Option<usize>,
    seed: u64,
    as_json: bool,
    out: &mut dyn Write,
) -> Outcome {
    let source: Box<dyn FixtureSource> = match fixtures {
        Some(dir) => Box::new(DirFixtures::new(dir)),
        None => Box::new(EmbeddedFixtures),
    };
    let reports = run_all(source.as_ref()).map_err(Failure::config)?;
    let mut passed = reports.iter().all(|r| r.passed);
    let fuzz_report = match fuzz {
        Some(episodes) => {
            let registry = load_policy(source.as_ref()).map_err(Failure::config)?;
            let report = fuzz_adversary_with(&registry, &FuzzOptions::new(episodes, seed))
                .map_err(Failure::runtime)?;
            passed &= report.is_clean();
            Some(report)
        }
        None => None,
    };
    if as_json {
        let value = json!({
            "scenarios": reports,
            "fuzz": fuzz_report,
            "passed": passed,
        });
        write_out(
            out,
            &format!(
                "{}\n",
                serde_json::to_string_pretty(&value).map_err(Failure::runtime)?
            ),
        )?;
    } else {
        for report in &reports {
            write_out(out, &report.render())?;
        }
        if let Some(r) = &fuzz_report {
            write_out(
                out,
                &format!(
                    "{} fuzz: {} episodes, {} calls, {} executed, {} violations, {} missed, {} wrong denials, {} corrupt accepted\n",
                    if r.is_clean() { "PASS" } else { "FAIL" },
                    r.episodes,
                    r.calls,
                    r.executed,
                    r.violations,
                    r.missed,
                    r.wrong_denials,
                    r.corrupt_accepted
                ),
            )?;
            for note in &r.notes {
                write_out(out, &format!("  {note}\n"))?;
            }
        }
    }
    Ok(if passed {
        exit::OK
    } else {
        exit::SIMULATION_FAILED
    })
}

fn policy_check(path: &Path, out: &mut dyn Write) -> Outcome {
    let text = read_file(path)?;
    match encprompt_core::policy::load_registry(&text) {
        Ok(registry) => {
            write_out(
                out,
                &format!(
                    "ok: {} apis, max_level {}, {} graphs\n",
                    registry.len(),
                    registry.max_level(),
                    registry.graphs().len()
                ),
            )?;
            Ok(exit::OK)
        }
        Err(e) => {
            let mut message = format!("{}: invalid policy", path.display());
            for d in &e.diagnostics {
                message.push_str(&format!("\n  {d}"));
            }
            Err(Failure::config(message))
        }
    }
}

/// `run` over the process arguments and standard streams.
pub fn main_with_std() -> i32 {
    // Unlocked handles: `serve` logs to stderr from other threads.
    run(std::env::args_os(), &mut io::stdout(), &mut io::stderr())
}
