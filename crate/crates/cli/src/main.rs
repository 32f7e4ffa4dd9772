//! `fedblind`: command-line front end for the blind federated enrollment
//! toolkit. Thin adapter over the library — key generation, role services,
//! enrollment actions against running services, and the simulator.
//!
//! Exit codes: 0 success, 1 protocol rejection (duplicate detected, bad
//! token, failed proof of possession, ...), 2 usage or configuration error.
//! All output is flat `key=value` lines.

use clap::{Parser, Subcommand};
use fedblind_core::credentials::{respond, Token, UserKeyPair};
use fedblind_core::harness::{run_scenario, Scenario, SimConfig};
use fedblind_core::numcore::{to_hex, RsaKeyPair, Seed, SeededRng};
use fedblind_core::oprfcore::DomainCredential;
use fedblind_core::protocol::{
    cooperative_check, first_enroll, subsequent_enroll, CheckOutcome, CheckSession, CtsNode,
    EnrollmentSession, FederationDirectory, IdpContext, IdpNode, KycOracle, PeerClient,
    ProtocolError, Upi,
};
use fedblind_core::wire::{
    self, Config, ServiceRole, WireCtsClient, WirePeerClient, CONFIG_ENV_VAR,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

#[derive(Parser)]
#[command(name = "fedblind", version, about = "Blind federated enrollment toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic RSA key pair and write it as a key file.
    Keygen {
        #[arg(long, default_value_t = 64)]
        key_bits: u64,
        /// 32-byte seed as 64 hex characters
        #[arg(long)]
        seed: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Issue a domain credential for an IdP and record its public exponent
    /// in the federation directory file.
    OnboardIdp {
        /// master key file (as written by keygen)
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        idp_id: String,
        #[arg(long)]
        seed: String,
        /// directory file; created from the master key if absent
        #[arg(long)]
        directory: PathBuf,
        /// where to write the credential file (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the master service on a TCP endpoint.
    ServeCts {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        listen: String,
        /// registry log path; loaded if present, persisted after mutations
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value = "serve-cts")]
        seed_label: String,
    },
    /// Run an identity-provider service on a TCP endpoint.
    ServeIdp {
        #[arg(long)]
        credential: PathBuf,
        #[arg(long)]
        directory: PathBuf,
        #[arg(long)]
        listen: String,
    },
    /// First-time enrollment against a running master service.
    Enroll {
        #[arg(long)]
        config: Option<PathBuf>,
        /// master service address; overrides the config file
        #[arg(long)]
        cts: Option<String>,
        #[arg(long)]
        upi: String,
        #[arg(long)]
        seed: String,
        #[arg(long)]
        token_out: Option<PathBuf>,
    },
    /// Subsequent registration presenting a previously issued token.
    EnrollWithToken {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cts: Option<String>,
        #[arg(long)]
        upi: String,
        #[arg(long)]
        seed: String,
        #[arg(long)]
        token: PathBuf,
        /// key file of the token's bound key pair
        #[arg(long)]
        user_key: PathBuf,
        #[arg(long)]
        token_out: Option<PathBuf>,
    },
    /// Cooperative blind global check for a token-less candidate.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cts: Option<String>,
        #[arg(long)]
        upi: String,
        #[arg(long)]
        seed: String,
    },
    /// Run a built-in simulator scenario and print its report.
    Sim {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: String,
        #[arg(long, default_value_t = 3)]
        n_idps: usize,
        #[arg(long, default_value_t = 3)]
        n_users: usize,
        #[arg(long, default_value_t = 64)]
        key_bits: u64,
        #[arg(long)]
        transcript_out: Option<PathBuf>,
    },
    /// Run a scenario and print only its leakage audit result.
    Audit {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: String,
        #[arg(long, default_value_t = 3)]
        n_idps: usize,
        #[arg(long, default_value_t = 3)]
        n_users: usize,
        #[arg(long, default_value_t = 64)]
        key_bits: u64,
        /// deliberately leaky variant, to demonstrate audit sensitivity
        #[arg(long)]
        mutant: bool,
    },
}

enum CliError {
    /// Exit 1: the protocol said no.
    Rejection(&'static str),
    /// Exit 2: bad invocation, bad config, or tooling failure.
    Usage(String),
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Transport(d) => CliError::Usage(format!("transport: {d}")),
            other => CliError::Rejection(other.code()),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn parse_seed(hex: &str) -> Result<Seed, CliError> {
    Seed::from_hex(hex).map_err(|e| CliError::Usage(format!("bad --seed: {e}")))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            std::fs::write(p, text)
                .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", p.display())))?;
            println!("written={}", p.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => match std::env::var(CONFIG_ENV_VAR) {
            Ok(p) => PathBuf::from(p),
            Err(_) => return Err(CliError::Usage(format!(
                "no --config given and {CONFIG_ENV_VAR} is unset"
            ))),
        },
    };
    Config::parse(&read(&path)?).map_err(usage)
}

/// Everything an enrollment-side command needs: the IdP context and the
/// master service address.
struct EnrollSetup {
    ctx: IdpContext,
    cts_addr: String,
    config: Config,
}

fn enroll_setup(
    config_path: Option<&Path>,
    cts_flag: Option<&str>,
    seed: &Seed,
) -> Result<EnrollSetup, CliError> {
    let config = load_config(config_path)?;
    let cts_addr = cts_flag
        .map(str::to_string)
        .or_else(|| config.get("cts").map(str::to_string))
        .ok_or_else(|| CliError::Usage("no master service address (--cts or cts=)".into()))?;
    let cred_path = config
        .get("credential")
        .ok_or_else(|| CliError::Usage("config is missing credential=".into()))?;
    let dir_path = config
        .get("directory")
        .ok_or_else(|| CliError::Usage("config is missing directory=".into()))?;
    let cred = DomainCredential::from_file(&read(Path::new(cred_path))?).map_err(usage)?;
    let directory =
        FederationDirectory::from_file(&read(Path::new(dir_path))?).map_err(usage)?;
    let ctx = IdpContext::new(cred, directory, SeededRng::new(*seed).fork("idp-session"));
    Ok(EnrollSetup { ctx, cts_addr, config })
}

fn print_token(token: &Token, token_out: Option<&Path>) -> Result<(), CliError> {
    println!("status=ok");
    println!("pid={}", to_hex(token.pid.value()));
    write_out(token_out, &token.to_file())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Keygen { key_bits, seed, out } => {
            let seed = parse_seed(&seed)?;
            let key = RsaKeyPair::generate(key_bits, seed).map_err(usage)?;
            write_out(out.as_deref(), &key.to_key_file())
        }
        Cmd::OnboardIdp { key, idp_id, seed, directory, out } => {
            let seed = parse_seed(&seed)?;
            let key = RsaKeyPair::from_key_file(&read(&key)?).map_err(usage)?;
            let mut dir = if directory.exists() {
                FederationDirectory::from_file(&read(&directory)?).map_err(usage)?
            } else {
                FederationDirectory::new(key.public())
            };
            if dir.entry(&idp_id).is_some() {
                return Err(CliError::Rejection("duplicate_idp_id"));
            }
            let mut rng = SeededRng::new(seed).fork("onboard");
            let cred = DomainCredential::issue(&idp_id, &key, &mut rng);
            dir.idps.push(fedblind_core::protocol::DirectoryEntry {
                idp_id: idp_id.clone(),
                e_public: cred.e_public.clone(),
            });
            std::fs::write(&directory, dir.to_file())
                .map_err(|e| CliError::Usage(format!("cannot write directory: {e}")))?;
            println!("idp_id={idp_id}");
            write_out(out.as_deref(), &cred.to_file())
        }
        Cmd::ServeCts { key, listen, registry, seed_label } => {
            let key = RsaKeyPair::from_key_file(&read(&key)?).map_err(usage)?;
            let mut node = CtsNode::new(key, SeededRng::new(Seed::from_label(&seed_label)));
            if let Some(path) = registry {
                node = node.with_registry_path(path).map_err(usage)?;
            }
            let handle =
                wire::serve(ServiceRole::Cts(Arc::new(Mutex::new(node))), listen.as_str())
                    .map_err(usage)?;
            announce(handle.local_addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::ServeIdp { credential, directory, listen } => {
            let cred = DomainCredential::from_file(&read(&credential)?).map_err(usage)?;
            let dir = FederationDirectory::from_file(&read(&directory)?).map_err(usage)?;
            let node = IdpNode::new(cred, dir.cts_pub.clone());
            let handle =
                wire::serve(ServiceRole::Idp(Arc::new(Mutex::new(node))), listen.as_str())
                    .map_err(usage)?;
            announce(handle.local_addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::Enroll { config, cts, upi, seed, token_out } => {
            let seed = parse_seed(&seed)?;
            let mut setup = enroll_setup(config.as_deref(), cts.as_deref(), &seed)?;
            let upi = Upi::new(upi.into_bytes()).map_err(CliError::from)?;
            let bits = setup.ctx.cts_pub().modulus_n.bits();
            let user = UserKeyPair::generate(bits + bits % 2, harness_subseed(&seed, "user-key"))
                .map_err(usage)?;
            let mut client = WireCtsClient::connect(&setup.cts_addr)?;
            let mut session = EnrollmentSession::new("cli-enroll");
            let mut signer = |c: &fedblind_core::credentials::Challenge| {
                respond(c, &user).map_err(ProtocolError::from)
            };
            let user_pub = user.public();
            let token = first_enroll(
                &mut session,
                &mut setup.ctx,
                &upi,
                &user_pub,
                &mut signer,
                &mut client,
                &KycOracle::pass_all(),
                None,
            )
            .map_err(|e| report_rejection(e))?;
            print_token(&token, token_out.as_deref())
        }
        Cmd::EnrollWithToken { config, cts, upi, seed, token, user_key, token_out } => {
            let seed = parse_seed(&seed)?;
            let mut setup = enroll_setup(config.as_deref(), cts.as_deref(), &seed)?;
            let upi = Upi::new(upi.into_bytes()).map_err(CliError::from)?;
            let presented = Token::from_file(&read(&token)?).map_err(usage)?;
            let user = UserKeyPair(RsaKeyPair::from_key_file(&read(&user_key)?).map_err(usage)?);
            let mut client = WireCtsClient::connect(&setup.cts_addr)?;
            let mut session = EnrollmentSession::new("cli-enroll-token");
            let mut signer = |c: &fedblind_core::credentials::Challenge| {
                respond(c, &user).map_err(ProtocolError::from)
            };
            let issued = subsequent_enroll(
                &mut session,
                &mut setup.ctx,
                &upi,
                &presented,
                &mut signer,
                &mut client,
                &KycOracle::pass_all(),
                None,
            )
            .map_err(|e| report_rejection(e))?;
            print_token(&issued, token_out.as_deref())
        }
        Cmd::Check { config, cts, upi, seed } => {
            let seed = parse_seed(&seed)?;
            let mut setup = enroll_setup(config.as_deref(), cts.as_deref(), &seed)?;
            let upi = Upi::new(upi.into_bytes()).map_err(CliError::from)?;
            let mut client = WireCtsClient::connect(&setup.cts_addr)?;
            let peer_entries = setup.config.with_prefix("peer.");
            let own = setup.ctx.id.clone();
            let mut peer_ids = Vec::new();
            let mut peers: Vec<Box<dyn PeerClient>> = Vec::new();
            for (id, addr) in peer_entries {
                if id == own {
                    continue;
                }
                peer_ids.push(id.to_string());
                peers.push(Box::new(WirePeerClient::connect(id, addr)?));
            }
            let mut session = CheckSession::new("cli-check", &peer_ids);
            let outcome = cooperative_check(
                &mut session,
                &mut setup.ctx,
                &upi,
                &mut client,
                &mut peers,
                None,
            )
            .map_err(|e| report_rejection(e))?;
            match outcome {
                CheckOutcome::Clear => {
                    println!("outcome=clear");
                    Ok(())
                }
                CheckOutcome::Matched(pid) => {
                    println!("outcome=matched");
                    println!("matched_pid={}", to_hex(pid.value()));
                    Err(CliError::Rejection("duplicate_detected"))
                }
                CheckOutcome::Pending => Err(CliError::Usage("check did not finish".into())),
            }
        }
        Cmd::Sim { scenario, seed, n_idps, n_users, key_bits, transcript_out } => {
            let config = SimConfig {
                n_idps,
                n_users,
                key_bits,
                seed: parse_seed(&seed)?,
                scenario: Scenario::from_name(&scenario).map_err(usage)?,
                mutant: false,
            };
            let out = run_scenario(&config).map_err(usage)?;
            print!("{}", out.report.to_text());
            if let Some(path) = transcript_out {
                std::fs::write(&path, out.transcript.to_text())
                    .map_err(|e| CliError::Usage(format!("cannot write transcript: {e}")))?;
            }
            Ok(())
        }
        Cmd::Audit { scenario, seed, n_idps, n_users, key_bits, mutant } => {
            let config = SimConfig {
                n_idps,
                n_users,
                key_bits,
                seed: parse_seed(&seed)?,
                scenario: Scenario::from_name(&scenario).map_err(usage)?,
                mutant,
            };
            let out = run_scenario(&config).map_err(usage)?;
            println!("scenario={scenario}");
            println!("mutant={mutant}");
            println!("leakage_violations={}", out.report.leakage_violations);
            Ok(())
        }
    }
}

/// Services run until killed; readiness is signaled by this flushed line.
fn announce(addr: std::net::SocketAddr) {
    use std::io::Write;
    println!("listening={addr}");
    let _ = std::io::stdout().flush();
}

/// Print the rejection line before mapping into an exit code.
fn report_rejection(e: ProtocolError) -> CliError {
    let mapped = CliError::from(e);
    if let CliError::Rejection(code) = &mapped {
        println!("status=rejected");
        println!("error={code}");
    }
    mapped
}

fn harness_subseed(seed: &Seed, label: &str) -> Seed {
    fedblind_core::harness::subseed(seed, label)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Rejection(_)) => ExitCode::from(1),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
