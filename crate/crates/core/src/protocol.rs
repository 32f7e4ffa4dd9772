//! Role state machines and orchestration for the three enrollment phases:
//! first-time enrollment, subsequent registration with a token, and the
//! cooperative blind global check for token-less attempts.
//!
//! The master-key holder and the identity providers are modeled as nodes
//! ([`CtsNode`], [`IdpNode`]) exposing exactly the operations the wire
//! protocol carries. Orchestration functions drive per-session state
//! machines ([`EnrollmentSession`], [`CheckSession`]) against client traits
//! ([`CtsClient`], [`PeerClient`]) so the same flows run in-process or over
//! the network.

use crate::credentials::{
    issue_token, make_challenge, verify_response, verify_token, Challenge, CredError, NonceLedger,
    Token,
};
use crate::numcore::{
    fdh_hash, from_hex, mod_pow, to_hex, Natural, NumError, PublicKey, RsaKeyPair, SeededRng,
};
use crate::oprfcore::{
    blind, domain_transform, exchange_blind, exchange_recover, unblind_domain, BlindedInput,
    BlindingFactor, DomainCredential, ExchangeBlinder, OprfError, Pid,
};
use crate::registry::{Registry, RegistryError, Status};
use num_traits::One;
use std::collections::HashMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("KYC verification failed")]
    KycFailed,
    #[error("proof of private-key possession failed")]
    ProofOfPossessionFailed,
    #[error("presented token does not verify")]
    InvalidToken,
    #[error("registry conflict: {0}")]
    RegistryConflict(RegistryError),
    #[error("peer {0} is unavailable")]
    PeerUnavailable(String),
    #[error("idp id {0} already onboarded")]
    DuplicateIdpId(String),
    #[error("operation out of phase order: expected {expected}, session is {found}")]
    OutOfPhase { expected: &'static str, found: &'static str },
    #[error("challenge nonce already consumed")]
    StaleNonce,
    #[error("upi must be non-empty")]
    EmptyUpi,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("remote error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error(transparent)]
    Oprf(#[from] OprfError),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl ProtocolError {
    /// Stable machine-readable code for reports and exit paths.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::KycFailed => "kyc_failed",
            ProtocolError::ProofOfPossessionFailed => "proof_of_possession_failed",
            ProtocolError::InvalidToken => "invalid_token",
            ProtocolError::RegistryConflict(RegistryError::AlreadyRegistered) => {
                "already_registered"
            }
            ProtocolError::RegistryConflict(RegistryError::AlarmLocked) => "alarm_locked",
            ProtocolError::RegistryConflict(_) => "registry_error",
            ProtocolError::PeerUnavailable(_) => "peer_unavailable",
            ProtocolError::DuplicateIdpId(_) => "duplicate_idp_id",
            ProtocolError::OutOfPhase { .. } => "out_of_phase",
            ProtocolError::StaleNonce => "stale_nonce",
            ProtocolError::EmptyUpi => "empty_upi",
            ProtocolError::Transport(_) => "transport",
            ProtocolError::Remote { .. } => "remote",
            ProtocolError::Oprf(_) => "out_of_range",
            ProtocolError::Num(_) => "num_error",
        }
    }
}

impl From<RegistryError> for ProtocolError {
    fn from(e: RegistryError) -> Self {
        ProtocolError::RegistryConflict(e)
    }
}

impl From<CredError> for ProtocolError {
    fn from(e: CredError) -> Self {
        match e {
            CredError::StaleNonce => ProtocolError::StaleNonce,
            CredError::ContextMismatch => ProtocolError::ProofOfPossessionFailed,
            CredError::Num(n) => ProtocolError::Num(n),
        }
    }
}

/// The user's unique personal identifier. Visible only to the user and the
/// enrolling IdP; everywhere else only `H(UPI)` or blinded forms circulate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Upi(Vec<u8>);

impl Upi {
    pub fn new(value: impl Into<Vec<u8>>) -> Result<Upi, ProtocolError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ProtocolError::EmptyUpi);
        }
        Ok(Upi(value))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

/// Published federation material: the master public key and each IdP's
/// public domain exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationDirectory {
    pub cts_pub: PublicKey,
    pub idps: Vec<DirectoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectoryEntry {
    pub idp_id: String,
    pub e_public: Natural,
}

impl FederationDirectory {
    pub fn new(cts_pub: PublicKey) -> Self {
        FederationDirectory { cts_pub, idps: Vec::new() }
    }

    pub fn entry(&self, idp_id: &str) -> Option<&DirectoryEntry> {
        self.idps.iter().find(|e| e.idp_id == idp_id)
    }

    fn add(&mut self, idp_id: &str, e_public: Natural) -> Result<(), ProtocolError> {
        if self.entry(idp_id).is_some() {
            return Err(ProtocolError::DuplicateIdpId(idp_id.to_string()));
        }
        self.idps.push(DirectoryEntry { idp_id: idp_id.to_string(), e_public });
        Ok(())
    }

    /// `cts_n=hex`, `cts_e=hex`, then one `idp:<id>=hex` line per IdP.
    pub fn to_file(&self) -> String {
        let mut out = format!(
            "cts_n={}\ncts_e={}\n",
            to_hex(&self.cts_pub.modulus_n),
            to_hex(&self.cts_pub.public_e)
        );
        for e in &self.idps {
            out.push_str(&format!("idp:{}={}\n", e.idp_id, to_hex(&e.e_public)));
        }
        out
    }

    pub fn from_file(text: &str) -> Result<FederationDirectory, ProtocolError> {
        let mut lines = text.lines();
        let n = lines
            .next()
            .and_then(|l| l.strip_prefix("cts_n="))
            .ok_or_else(|| ProtocolError::Num(NumError::BadKeyFile("missing cts_n".into())))?;
        let e = lines
            .next()
            .and_then(|l| l.strip_prefix("cts_e="))
            .ok_or_else(|| ProtocolError::Num(NumError::BadKeyFile("missing cts_e".into())))?;
        let cts_pub = PublicKey::new(from_hex(n)?, from_hex(e)?)?;
        let mut dir = FederationDirectory::new(cts_pub);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rest = line.strip_prefix("idp:").ok_or_else(|| {
                ProtocolError::Num(NumError::BadKeyFile(format!("bad directory line {line:?}")))
            })?;
            let (id, hex) = rest.split_once('=').ok_or_else(|| {
                ProtocolError::Num(NumError::BadKeyFile(format!("bad directory line {line:?}")))
            })?;
            let e_public = from_hex(hex)?;
            if e_public < Natural::from(3u32) || e_public >= dir.cts_pub.modulus_n || e_public.bit(0) == false {
                return Err(ProtocolError::Num(NumError::InvalidKey(format!(
                    "directory exponent for {id} must be odd, >= 3, < N"
                ))));
            }
            dir.add(id, e_public)?;
        }
        Ok(dir)
    }
}

/// Scenario-configurable stand-in for real KYC verification.
#[derive(Debug, Clone, Default)]
pub struct KycOracle {
    failing: Vec<Vec<u8>>,
}

impl KycOracle {
    pub fn pass_all() -> Self {
        Self::default()
    }

    pub fn failing(upis: impl IntoIterator<Item = Upi>) -> Self {
        KycOracle { failing: upis.into_iter().map(|u| u.0).collect() }
    }

    pub fn check(&self, upi: &Upi) -> bool {
        !self.failing.iter().any(|f| f == &upi.0)
    }
}

// ---------------------------------------------------------------------------
// Nodes: the server-side cores shared by in-process and wire deployments

/// Master-key holder: evaluates blinded inputs, issues tokens after proof of
/// possession, and owns the blind registry.
pub struct CtsNode {
    key: RsaKeyPair,
    pub registry: Registry,
    pub directory: FederationDirectory,
    nonce_ledger: NonceLedger,
    rng: SeededRng,
    pending_issues: HashMap<[u8; 32], (Pid, PublicKey)>,
    registry_path: Option<PathBuf>,
}

impl CtsNode {
    pub fn new(key: RsaKeyPair, rng: SeededRng) -> CtsNode {
        let width = key.modulus_len();
        let directory = FederationDirectory::new(key.public());
        CtsNode {
            key,
            registry: Registry::new(width),
            directory,
            nonce_ledger: NonceLedger::new(),
            rng,
            pending_issues: HashMap::new(),
            registry_path: None,
        }
    }

    /// Persist the registry to `path` after every mutation.
    pub fn with_registry_path(mut self, path: PathBuf) -> Result<CtsNode, ProtocolError> {
        if path.exists() {
            self.registry = Registry::load(&path, self.key.modulus_len())?;
        }
        self.registry_path = Some(path);
        Ok(self)
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn key(&self) -> &RsaKeyPair {
        &self.key
    }

    fn persist(&self) -> Result<(), ProtocolError> {
        if let Some(path) = &self.registry_path {
            self.registry.persist(path)?;
        }
        Ok(())
    }

    /// Issues a fresh domain credential: private exponent to the IdP,
    /// public exponent into the directory.
    pub fn onboard_idp(&mut self, idp_id: &str) -> Result<DomainCredential, ProtocolError> {
        if self.directory.entry(idp_id).is_some() {
            return Err(ProtocolError::DuplicateIdpId(idp_id.to_string()));
        }
        let cred = DomainCredential::issue(idp_id, &self.key, &mut self.rng);
        self.directory.add(idp_id, cred.e_public.clone())?;
        Ok(cred)
    }

    pub fn eval(&self, x: &Natural) -> Result<Natural, ProtocolError> {
        Ok(crate::oprfcore::eval(&BlindedInput(x.clone()), &self.key)?)
    }

    /// Starts token issuance: parks `(pid, pk_u)` and returns the challenge
    /// the user must sign.
    pub fn begin_token_issue(&mut self, pid: Pid, user_pub: PublicKey) -> Challenge {
        let challenge = make_challenge(&mut self.rng);
        self.pending_issues.insert(challenge.nonce, (pid, user_pub));
        challenge
    }

    /// Completes issuance: checks the nonce, verifies the proof of
    /// possession, records `(pid, ok)`, and signs the token. Nothing is
    /// written unless every check passes.
    pub fn finish_token_issue(
        &mut self,
        nonce: &[u8; 32],
        response: &Natural,
    ) -> Result<Token, ProtocolError> {
        self.nonce_ledger.consume(nonce)?;
        let (pid, user_pub) = self
            .pending_issues
            .remove(nonce)
            .ok_or(ProtocolError::ProofOfPossessionFailed)?;
        let challenge = Challenge {
            nonce: *nonce,
            context: crate::credentials::CHALLENGE_CONTEXT.to_string(),
        };
        if !verify_response(&challenge, response, &user_pub) {
            return Err(ProtocolError::ProofOfPossessionFailed);
        }
        self.registry.insert(&pid, Status::Ok)?;
        let token = issue_token(&pid, &user_pub, &self.key)?;
        self.persist()?;
        Ok(token)
    }

    pub fn registry_match(&self, pids: &[Pid]) -> Option<Pid> {
        self.registry.match_any(pids)
    }

    /// Records `(pid, alarm)`. A pid that is already alarm-locked stays as
    /// it is.
    pub fn alarm_insert(&mut self, pid: &Pid) -> Result<(), ProtocolError> {
        match self.registry.insert(pid, Status::Alarm) {
            Ok(_) => {
                self.persist()?;
                Ok(())
            }
            Err(RegistryError::AlarmLocked) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

/// An identity provider's service core: the peer-facing duties of the
/// cooperative check.
pub struct IdpNode {
    pub cred: DomainCredential,
    pub cts_pub: PublicKey,
}

impl IdpNode {
    pub fn new(cred: DomainCredential, cts_pub: PublicKey) -> IdpNode {
        IdpNode { cred, cts_pub }
    }

    /// `T = X^t mod N`.
    pub fn transform(&self, x: &Natural) -> Result<Natural, ProtocolError> {
        let n = &self.cts_pub.modulus_n;
        if x < &Natural::one() || x >= n {
            return Err(ProtocolError::Oprf(OprfError::OutOfRange));
        }
        Ok(domain_transform(&BlindedInput(x.clone()), &self.cred, &self.cts_pub).0)
    }

    /// `s = m^t mod N`.
    pub fn exchange(&self, m: &Natural) -> Result<Natural, ProtocolError> {
        Ok(crate::oprfcore::exchange_apply(m, &self.cred, &self.cts_pub)?)
    }
}

// ---------------------------------------------------------------------------
// Client traits: how the enrolling IdP reaches the CTS and its peers

/// Signs a proof-of-possession challenge; the honest user signs with their
/// own key, an adversary signs with whatever they hold.
pub type ChallengeSigner<'a> = dyn FnMut(&Challenge) -> Result<Natural, ProtocolError> + 'a;

pub trait CtsClient {
    fn eval(&mut self, session_id: &str, x: &Natural) -> Result<Natural, ProtocolError>;
    fn token_issue(
        &mut self,
        session_id: &str,
        pid: &Pid,
        user_pub: &PublicKey,
        signer: &mut ChallengeSigner<'_>,
    ) -> Result<Token, ProtocolError>;
    fn registry_match(&mut self, session_id: &str, pids: &[Pid]) -> Result<Option<Pid>, ProtocolError>;
    fn alarm_insert(&mut self, session_id: &str, pid: &Pid) -> Result<(), ProtocolError>;
}

pub trait PeerClient {
    fn idp_id(&self) -> &str;
    fn transform(&mut self, session_id: &str, x: &Natural) -> Result<Natural, ProtocolError>;
    fn exchange(&mut self, session_id: &str, m: &Natural) -> Result<Natural, ProtocolError>;
}

/// The enrolling IdP's local state: its credential, the published directory,
/// a nonce ledger for the challenges it issues, and its randomness stream.
pub struct IdpContext {
    pub id: String,
    pub cred: DomainCredential,
    pub directory: FederationDirectory,
    pub nonce_ledger: NonceLedger,
    pub rng: SeededRng,
}

impl IdpContext {
    pub fn new(cred: DomainCredential, directory: FederationDirectory, rng: SeededRng) -> IdpContext {
        IdpContext { id: cred.idp_id.clone(), cred, directory, nonce_ledger: NonceLedger::new(), rng }
    }

    pub fn cts_pub(&self) -> &PublicKey {
        &self.directory.cts_pub
    }
}

/// Harness instrumentation: copies of session-scoped secrets for the
/// leakage audit. Production callers pass `None`.
#[derive(Debug, Default, Clone)]
pub struct SecretsTap {
    pub blinding_factors: Vec<Natural>,
    pub exchange_blinders: Vec<Natural>,
}

// ---------------------------------------------------------------------------
// Enrollment session state machine

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollPhase {
    Init,
    Blinded,
    Transformed,
    Evaluated,
    Unblinded,
    Challenged,
    TokenIssued,
    Rejected,
}

impl EnrollPhase {
    fn name(self) -> &'static str {
        match self {
            EnrollPhase::Init => "init",
            EnrollPhase::Blinded => "blinded",
            EnrollPhase::Transformed => "transformed",
            EnrollPhase::Evaluated => "evaluated",
            EnrollPhase::Unblinded => "unblinded",
            EnrollPhase::Challenged => "challenged",
            EnrollPhase::TokenIssued => "token_issued",
            EnrollPhase::Rejected => "rejected",
        }
    }
}

/// Per-registration state on the enrolling IdP. Phases advance strictly in
/// order; any failure moves to `rejected`; terminal phases hold no secrets.
#[derive(Debug)]
pub struct EnrollmentSession {
    pub session_id: String,
    phase: EnrollPhase,
    r: Option<BlindingFactor>,
    x: Option<Natural>,
    blinded: Option<BlindedInput>,
    transformed: Option<BlindedInput>,
    evaluated: Option<Natural>,
    pid: Option<Pid>,
}

impl EnrollmentSession {
    pub fn new(session_id: impl Into<String>) -> EnrollmentSession {
        EnrollmentSession {
            session_id: session_id.into(),
            phase: EnrollPhase::Init,
            r: None,
            x: None,
            blinded: None,
            transformed: None,
            evaluated: None,
            pid: None,
        }
    }

    pub fn phase(&self) -> EnrollPhase {
        self.phase
    }

    fn expect(&self, expected: EnrollPhase) -> Result<(), ProtocolError> {
        if self.phase != expected {
            return Err(ProtocolError::OutOfPhase {
                expected: expected.name(),
                found: self.phase.name(),
            });
        }
        Ok(())
    }

    /// init -> blinded: hash the UPI and blind it.
    pub fn blind_input(
        &mut self,
        upi: &Upi,
        cts_pub: &PublicKey,
        rng: &mut SeededRng,
        tap: Option<&mut SecretsTap>,
    ) -> Result<BlindedInput, ProtocolError> {
        self.expect(EnrollPhase::Init)?;
        let x = fdh_hash(upi.as_bytes(), cts_pub)?;
        let r = BlindingFactor::random(rng, cts_pub);
        if let Some(tap) = tap {
            tap.blinding_factors.push(r.value().clone());
        }
        let blinded = blind(&x, &r, cts_pub)?;
        self.x = Some(x);
        self.r = Some(r);
        self.blinded = Some(blinded.clone());
        self.phase = EnrollPhase::Blinded;
        Ok(blinded)
    }

    /// blinded -> transformed: apply the own-domain exponent.
    pub fn transform(
        &mut self,
        cred: &DomainCredential,
        cts_pub: &PublicKey,
    ) -> Result<BlindedInput, ProtocolError> {
        self.expect(EnrollPhase::Blinded)?;
        let blinded = self.blinded.as_ref().expect("blinded phase holds the blinded input");
        let transformed = domain_transform(blinded, cred, cts_pub);
        self.transformed = Some(transformed.clone());
        self.phase = EnrollPhase::Transformed;
        Ok(transformed)
    }

    /// transformed -> evaluated: absorb the evaluation from the CTS.
    pub fn absorb_eval(&mut self, y: Natural) -> Result<(), ProtocolError> {
        self.expect(EnrollPhase::Transformed)?;
        self.evaluated = Some(y);
        self.phase = EnrollPhase::Evaluated;
        Ok(())
    }

    /// evaluated -> unblinded: strip `r^t` computed locally.
    pub fn unblind(
        &mut self,
        cred: &DomainCredential,
        cts_pub: &PublicKey,
    ) -> Result<Pid, ProtocolError> {
        self.expect(EnrollPhase::Evaluated)?;
        let r = self.r.as_ref().expect("evaluated phase holds r");
        let y = self.evaluated.as_ref().expect("evaluated phase holds y");
        let r_t = mod_pow(r.value(), &cred.t_private, &cts_pub.modulus_n)?;
        let pid = unblind_domain(y, &r_t, cts_pub)?;
        self.pid = Some(pid.clone());
        self.phase = EnrollPhase::Unblinded;
        Ok(pid)
    }

    /// unblinded -> challenged: token issuance has begun.
    pub fn mark_challenged(&mut self) -> Result<(), ProtocolError> {
        self.expect(EnrollPhase::Unblinded)?;
        self.phase = EnrollPhase::Challenged;
        Ok(())
    }

    /// challenged -> token_issued (terminal, secrets erased).
    pub fn complete(&mut self) -> Result<(), ProtocolError> {
        self.expect(EnrollPhase::Challenged)?;
        self.erase();
        self.phase = EnrollPhase::TokenIssued;
        Ok(())
    }

    /// Any phase -> rejected (terminal, secrets erased).
    pub fn reject(&mut self) {
        self.erase();
        self.phase = EnrollPhase::Rejected;
    }

    fn erase(&mut self) {
        self.r = None;
        self.x = None;
        self.blinded = None;
        self.transformed = None;
        self.evaluated = None;
    }

    pub fn pid(&self) -> Option<&Pid> {
        self.pid.as_ref()
    }

    /// True once no blinding secrets remain.
    pub fn secrets_erased(&self) -> bool {
        self.r.is_none() && self.x.is_none()
    }
}

// ---------------------------------------------------------------------------
// Cooperative check session

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Pending,
    Clear,
    Matched(Pid),
}

#[derive(Debug)]
struct PeerSlot {
    idp_id: String,
    k: Option<ExchangeBlinder>,
    t_power: Option<Natural>,
    y: Option<Natural>,
    pid: Option<Pid>,
}

/// State for one cooperative blind global check run by the enrolling IdP.
#[derive(Debug)]
pub struct CheckSession {
    pub session_id: String,
    r: Option<BlindingFactor>,
    blinded: Option<BlindedInput>,
    peers: Vec<PeerSlot>,
    own_pid: Option<Pid>,
    outcome: CheckOutcome,
}

impl CheckSession {
    pub fn new(session_id: impl Into<String>, peer_ids: &[String]) -> CheckSession {
        CheckSession {
            session_id: session_id.into(),
            r: None,
            blinded: None,
            peers: peer_ids
                .iter()
                .map(|id| PeerSlot { idp_id: id.clone(), k: None, t_power: None, y: None, pid: None })
                .collect(),
            own_pid: None,
            outcome: CheckOutcome::Pending,
        }
    }

    pub fn outcome(&self) -> &CheckOutcome {
        &self.outcome
    }

    /// The enrolling IdP's own-domain pid, derived in the same pass; this is
    /// what an alarm record uses.
    pub fn own_pid(&self) -> Option<&Pid> {
        self.own_pid.as_ref()
    }

    pub fn secrets_erased(&self) -> bool {
        self.r.is_none() && self.peers.iter().all(|p| p.k.is_none())
    }

    fn finish(&mut self, outcome: CheckOutcome) {
        self.r = None;
        self.blinded = None;
        for peer in &mut self.peers {
            peer.k = None;
        }
        self.outcome = outcome;
    }
}

// ---------------------------------------------------------------------------
// Orchestration

fn run_oprf_derivation(
    session: &mut EnrollmentSession,
    idp: &mut IdpContext,
    upi: &Upi,
    cts: &mut dyn CtsClient,
    tap: Option<&mut SecretsTap>,
) -> Result<Pid, ProtocolError> {
    let cts_pub = idp.directory.cts_pub.clone();
    session.blind_input(upi, &cts_pub, &mut idp.rng, tap)?;
    let transformed = session.transform(&idp.cred, &cts_pub)?;
    let y = cts.eval(&session.session_id, transformed.value())?;
    session.absorb_eval(y)?;
    session.unblind(&idp.cred, &cts_pub)
}

/// First-time enrollment: KYC, OPRF pseudonym derivation, then token
/// issuance gated on proof of possession. Any failing step rejects the
/// session with no registry write.
pub fn first_enroll(
    session: &mut EnrollmentSession,
    idp: &mut IdpContext,
    upi: &Upi,
    user_pub: &PublicKey,
    signer: &mut ChallengeSigner<'_>,
    cts: &mut dyn CtsClient,
    kyc: &KycOracle,
    tap: Option<&mut SecretsTap>,
) -> Result<Token, ProtocolError> {
    let result = (|| {
        if !kyc.check(upi) {
            return Err(ProtocolError::KycFailed);
        }
        let pid = run_oprf_derivation(session, idp, upi, cts, tap)?;
        session.mark_challenged()?;
        let token = cts.token_issue(&session.session_id, &pid, user_pub, signer)?;
        session.complete()?;
        Ok(token)
    })();
    if result.is_err() {
        session.reject();
    }
    result
}

/// Subsequent registration: the user presents a previously issued token and
/// proves possession of its bound key to the IdP before KYC and the usual
/// OPRF derivation.
#[allow(clippy::too_many_arguments)]
pub fn subsequent_enroll(
    session: &mut EnrollmentSession,
    idp: &mut IdpContext,
    upi: &Upi,
    presented: &Token,
    signer: &mut ChallengeSigner<'_>,
    cts: &mut dyn CtsClient,
    kyc: &KycOracle,
    tap: Option<&mut SecretsTap>,
) -> Result<Token, ProtocolError> {
    let result = (|| {
        if !verify_token(presented, idp.cts_pub()) {
            return Err(ProtocolError::InvalidToken);
        }
        // IdP-side proof of possession against the key inside the token
        let challenge = make_challenge(&mut idp.rng);
        let response = signer(&challenge)?;
        idp.nonce_ledger.consume(&challenge.nonce)?;
        if !verify_response(&challenge, &response, &presented.user_pub) {
            return Err(ProtocolError::ProofOfPossessionFailed);
        }
        if !kyc.check(upi) {
            return Err(ProtocolError::KycFailed);
        }
        let pid = run_oprf_derivation(session, idp, upi, cts, tap)?;
        session.mark_challenged()?;
        let token = cts.token_issue(&session.session_id, &pid, &presented.user_pub, signer)?;
        session.complete()?;
        Ok(token)
    })();
    if result.is_err() {
        session.reject();
    }
    result
}

/// Cooperative blind global check for a token-less attempt: blinded
/// submission, distributed domain transformations, evaluations, exponent
/// exchanges, local unblinding, and the registry match. On a match the
/// enrolling IdP's own-domain pid is alarm-recorded. A peer failure aborts
/// with no registry write.
pub fn cooperative_check(
    session: &mut CheckSession,
    idp: &mut IdpContext,
    upi: &Upi,
    cts: &mut dyn CtsClient,
    peers: &mut [Box<dyn PeerClient>],
    tap: Option<&mut SecretsTap>,
) -> Result<CheckOutcome, ProtocolError> {
    let cts_pub = idp.directory.cts_pub.clone();
    let sid = session.session_id.clone();

    let x = fdh_hash(upi.as_bytes(), &cts_pub)?;
    let r = BlindingFactor::random(&mut idp.rng, &cts_pub);
    let blinded = blind(&x, &r, &cts_pub)?;
    let mut exchange_tap = Vec::new();

    let result: Result<CheckOutcome, ProtocolError> = (|| {
        // own domain, same pass: transform locally, evaluate, unblind
        let own_t = domain_transform(&blinded, &idp.cred, &cts_pub);
        let own_y = cts.eval(&sid, own_t.value())?;
        let own_r_t = mod_pow(r.value(), &idp.cred.t_private, &cts_pub.modulus_n)?;
        let own_pid = unblind_domain(&own_y, &own_r_t, &cts_pub)?;
        session.own_pid = Some(own_pid.clone());

        // peer domains
        let mut peer_pids = Vec::new();
        for peer in peers.iter_mut() {
            let slot = session
                .peers
                .iter_mut()
                .find(|s| s.idp_id == peer.idp_id())
                .ok_or_else(|| ProtocolError::PeerUnavailable(peer.idp_id().to_string()))?;
            let e_public = idp
                .directory
                .entry(peer.idp_id())
                .ok_or_else(|| ProtocolError::PeerUnavailable(peer.idp_id().to_string()))?
                .e_public
                .clone();
            let t_j = peer.transform(&sid, blinded.value())?;
            let y_j = cts.eval(&sid, &t_j)?;
            let k = ExchangeBlinder::random(&mut idp.rng, &cts_pub);
            exchange_tap.push(k.value().clone());
            let m = exchange_blind(&r, &k, &e_public, &cts_pub);
            let s = peer.exchange(&sid, &m)?;
            let r_t = exchange_recover(&s, &k, &cts_pub);
            let pid_j = unblind_domain(&y_j, &r_t, &cts_pub)?;
            slot.k = Some(k);
            slot.t_power = Some(r_t);
            slot.y = Some(y_j);
            slot.pid = Some(pid_j.clone());
            peer_pids.push(pid_j);
        }

        // registry match over every reconstructed pid; own domain last
        let mut candidates = peer_pids;
        candidates.push(own_pid.clone());
        let matched = cts.registry_match(&sid, &candidates)?;
        match matched {
            Some(pid) => {
                cts.alarm_insert(&sid, &own_pid)?;
                Ok(CheckOutcome::Matched(pid))
            }
            None => Ok(CheckOutcome::Clear),
        }
    })();

    if let Some(tap) = tap {
        tap.blinding_factors.push(r.value().clone());
        tap.exchange_blinders.extend(exchange_tap);
    }
    session.r = Some(r);
    session.blinded = Some(blinded);
    match &result {
        Ok(outcome) => session.finish(outcome.clone()),
        Err(_) => session.finish(CheckOutcome::Pending),
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credentials::UserKeyPair;
    use crate::numcore::Seed;
    use crate::registry::LookupResult;
    use std::cell::RefCell;
    use std::rc::Rc;

    // direct in-process clients, no transcript; the harness has fancier ones
    struct DirectCts(Rc<RefCell<CtsNode>>);

    impl CtsClient for DirectCts {
        fn eval(&mut self, _s: &str, x: &Natural) -> Result<Natural, ProtocolError> {
            self.0.borrow().eval(x)
        }
        fn token_issue(
            &mut self,
            _s: &str,
            pid: &Pid,
            user_pub: &PublicKey,
            signer: &mut ChallengeSigner<'_>,
        ) -> Result<Token, ProtocolError> {
            let challenge = self.0.borrow_mut().begin_token_issue(pid.clone(), user_pub.clone());
            let response = signer(&challenge)?;
            self.0.borrow_mut().finish_token_issue(&challenge.nonce, &response)
        }
        fn registry_match(&mut self, _s: &str, pids: &[Pid]) -> Result<Option<Pid>, ProtocolError> {
            Ok(self.0.borrow().registry_match(pids))
        }
        fn alarm_insert(&mut self, _s: &str, pid: &Pid) -> Result<(), ProtocolError> {
            self.0.borrow_mut().alarm_insert(pid)
        }
    }

    struct DirectPeer {
        id: String,
        node: Rc<RefCell<IdpNode>>,
        available: bool,
    }

    impl PeerClient for DirectPeer {
        fn idp_id(&self) -> &str {
            &self.id
        }
        fn transform(&mut self, _s: &str, x: &Natural) -> Result<Natural, ProtocolError> {
            if !self.available {
                return Err(ProtocolError::PeerUnavailable(self.id.clone()));
            }
            self.node.borrow().transform(x)
        }
        fn exchange(&mut self, _s: &str, m: &Natural) -> Result<Natural, ProtocolError> {
            if !self.available {
                return Err(ProtocolError::PeerUnavailable(self.id.clone()));
            }
            self.node.borrow().exchange(m)
        }
    }

    struct TestFed {
        cts: Rc<RefCell<CtsNode>>,
        idps: Vec<IdpContext>,
        nodes: Vec<Rc<RefCell<IdpNode>>>,
    }

    fn build_fed(label: &str, n_idps: usize) -> TestFed {
        let seed = Seed::from_label(label);
        let key = RsaKeyPair::generate(64, seed).unwrap();
        let mut cts = CtsNode::new(key.clone(), SeededRng::new(seed).fork("cts"));
        let mut creds = Vec::new();
        for i in 0..n_idps {
            creds.push(cts.onboard_idp(&format!("idp-{i}")).unwrap());
        }
        let directory = cts.directory.clone();
        let idps: Vec<IdpContext> = creds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                IdpContext::new(c.clone(), directory.clone(), SeededRng::new(seed).fork(&format!("idp-{i}")))
            })
            .collect();
        let nodes = creds
            .iter()
            .map(|c| Rc::new(RefCell::new(IdpNode::new(c.clone(), key.public()))))
            .collect();
        TestFed { cts: Rc::new(RefCell::new(cts)), idps, nodes }
    }

    fn user_keys(label: &str) -> UserKeyPair {
        UserKeyPair::generate(48, Seed::from_label(label)).unwrap()
    }

    fn peers_for(fed: &TestFed, me: usize) -> Vec<Box<dyn PeerClient>> {
        fed.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != me)
            .map(|(i, n)| {
                Box::new(DirectPeer { id: format!("idp-{i}"), node: n.clone(), available: true })
                    as Box<dyn PeerClient>
            })
            .collect()
    }

    fn honest_signer(keys: &UserKeyPair) -> impl FnMut(&Challenge) -> Result<Natural, ProtocolError> + '_ {
        move |ch| Ok(crate::credentials::respond(ch, keys)?)
    }

    #[test]
    fn onboarding_invariants() {
        let fed = build_fed("onboard", 5);
        let cts = fed.cts.borrow();
        let lambda = &cts.key.lambda_n;
        assert_eq!(cts.directory.idps.len(), 5);
        let mut exponents = Vec::new();
        for idp in &fed.idps {
            assert!(((&idp.cred.t_private * &idp.cred.e_public) % lambda).is_one());
            exponents.push(idp.cred.e_public.clone());
        }
        exponents.dedup();
        assert_eq!(exponents.len(), 5);
    }

    #[test]
    fn onboarding_rejects_duplicate_id() {
        let fed = build_fed("onboard-dup", 1);
        let err = fed.cts.borrow_mut().onboard_idp("idp-0").unwrap_err();
        assert_eq!(err, ProtocolError::DuplicateIdpId("idp-0".into()));
    }

    #[test]
    fn toy_exponent_pair() {
        // N=35, lambda=12: (e=7, t=7) valid since 49 = 48+1
        assert_eq!((Natural::from(49u32)) % Natural::from(12u32), Natural::from(1u32));
    }

    #[test]
    fn first_enroll_happy_path() {
        let mut fed = build_fed("fe-happy", 2);
        let keys = user_keys("fe-user");
        let upi = Upi::new("upi-100").unwrap();
        let mut session = EnrollmentSession::new("s1");
        let mut cts = DirectCts(fed.cts.clone());
        let token = first_enroll(
            &mut session,
            &mut fed.idps[0],
            &upi,
            &keys.public(),
            &mut honest_signer(&keys),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap();
        assert_eq!(session.phase(), EnrollPhase::TokenIssued);
        assert!(session.secrets_erased());
        assert!(verify_token(&token, &fed.cts.borrow().public()));
        let pid = session.pid().unwrap();
        assert_eq!(fed.cts.borrow().registry.lookup(pid), LookupResult::Ok);
        // pid equals the direct oracle H(UPI)^(d*t) mod N
        let cts_node = fed.cts.borrow();
        let x = fdh_hash(upi.as_bytes(), &cts_node.public()).unwrap();
        let exp = &cts_node.key.private_d * &fed.idps[0].cred.t_private;
        assert_eq!(pid.value(), &mod_pow(&x, &exp, &cts_node.key.modulus_n).unwrap());
    }

    #[test]
    fn first_enroll_same_upi_same_idp_conflicts() {
        let mut fed = build_fed("fe-dup", 1);
        let keys = user_keys("fe-dup-user");
        let upi = Upi::new("upi-dup").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut s1 = EnrollmentSession::new("s1");
        first_enroll(
            &mut s1,
            &mut fed.idps[0],
            &upi,
            &keys.public(),
            &mut honest_signer(&keys),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap();
        let mut s2 = EnrollmentSession::new("s2");
        let err = first_enroll(
            &mut s2,
            &mut fed.idps[0],
            &upi,
            &keys.public(),
            &mut honest_signer(&keys),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::RegistryConflict(RegistryError::AlreadyRegistered));
        assert_eq!(s2.phase(), EnrollPhase::Rejected);
        // same pid recomputed deterministically
        assert_eq!(s1.pid(), s2.pid());
    }

    #[test]
    fn first_enroll_wrong_key_leaves_registry_unchanged() {
        let mut fed = build_fed("fe-wrong-sk", 1);
        let honest = user_keys("honest");
        let thief = user_keys("thief");
        let upi = Upi::new("upi-wk").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut session = EnrollmentSession::new("s1");
        let err = first_enroll(
            &mut session,
            &mut fed.idps[0],
            &upi,
            &honest.public(),
            &mut honest_signer(&thief),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::ProofOfPossessionFailed);
        assert_eq!(session.phase(), EnrollPhase::Rejected);
        assert!(session.secrets_erased());
        assert_eq!(fed.cts.borrow().registry.records().len(), 0);
    }

    #[test]
    fn first_enroll_kyc_fail_writes_nothing() {
        let mut fed = build_fed("fe-kyc", 1);
        let keys = user_keys("kyc-user");
        let upi = Upi::new("upi-kyc").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut session = EnrollmentSession::new("s1");
        let kyc = KycOracle::failing([upi.clone()]);
        let err = first_enroll(
            &mut session,
            &mut fed.idps[0],
            &upi,
            &keys.public(),
            &mut honest_signer(&keys),
            &mut cts,
            &kyc,
            None,
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::KycFailed);
        assert_eq!(fed.cts.borrow().registry.records().len(), 0);
    }

    #[test]
    fn subsequent_enroll_across_domains() {
        let mut fed = build_fed("se-cross", 2);
        let keys = user_keys("se-user");
        let upi = Upi::new("upi-200").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut s1 = EnrollmentSession::new("s1");
        let token1 = first_enroll(
            &mut s1,
            &mut fed.idps[0],
            &upi,
            &keys.public(),
            &mut honest_signer(&keys),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap();
        let mut s2 = EnrollmentSession::new("s2");
        let token2 = subsequent_enroll(
            &mut s2,
            &mut fed.idps[1],
            &upi,
            &token1,
            &mut honest_signer(&keys),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap();
        assert_ne!(token1.pid, token2.pid);
        assert_eq!(token1.user_pub, token2.user_pub);
        let (ok, alarm, _) = fed.cts.borrow().registry.summary();
        assert_eq!((ok, alarm), (2, 0));
        // tokens carry no issuer field
        assert!(!token2.to_file().contains("idp"));
    }

    #[test]
    fn stolen_token_rejected() {
        let mut fed = build_fed("se-stolen", 2);
        let victim = user_keys("victim");
        let upi = Upi::new("upi-300").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut s1 = EnrollmentSession::new("s1");
        let token = first_enroll(
            &mut s1,
            &mut fed.idps[0],
            &upi,
            &victim.public(),
            &mut honest_signer(&victim),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap();
        let adversary = user_keys("adversary");
        let adv_upi = Upi::new("upi-adv").unwrap();
        let mut s2 = EnrollmentSession::new("s2");
        let err = subsequent_enroll(
            &mut s2,
            &mut fed.idps[1],
            &adv_upi,
            &token,
            &mut honest_signer(&adversary),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::ProofOfPossessionFailed);
        assert_eq!(fed.cts.borrow().registry.records().len(), 1);
    }

    #[test]
    fn forged_token_rejected() {
        let mut fed = build_fed("se-forged", 1);
        let adversary = user_keys("forger");
        let upi = Upi::new("upi-400").unwrap();
        let forged = Token {
            pid: Pid(Natural::from(12345u32)),
            user_pub: adversary.public(),
            signature: Natural::from(9999u32),
        };
        let mut cts = DirectCts(fed.cts.clone());
        let mut session = EnrollmentSession::new("s1");
        let err = subsequent_enroll(
            &mut session,
            &mut fed.idps[0],
            &upi,
            &forged,
            &mut honest_signer(&adversary),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::InvalidToken);
    }

    #[test]
    fn cooperative_check_detects_cross_domain_duplicate() {
        let mut fed = build_fed("cc-dup", 3);
        let keys = user_keys("cc-user");
        let upi = Upi::new("upi-500").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut s1 = EnrollmentSession::new("s1");
        first_enroll(
            &mut s1,
            &mut fed.idps[1],
            &upi,
            &keys.public(),
            &mut honest_signer(&keys),
            &mut cts,
            &KycOracle::pass_all(),
            None,
        )
        .unwrap();
        let pid_at_1 = s1.pid().unwrap().clone();

        // token-less retry at idp-2
        let mut check = CheckSession::new("c1", &["idp-0".into(), "idp-1".into()]);
        let mut peers = peers_for(&fed, 2);
        let outcome = cooperative_check(&mut check, &mut fed.idps[2], &upi, &mut cts, &mut peers, None).unwrap();
        assert_eq!(outcome, CheckOutcome::Matched(pid_at_1.clone()));
        assert!(check.secrets_erased());
        // alarm recorded under idp-2's own-domain pid
        let own = check.own_pid().unwrap();
        assert_ne!(own, &pid_at_1);
        assert_eq!(fed.cts.borrow().registry.lookup(own), LookupResult::Alarm);
    }

    #[test]
    fn cooperative_check_clear_for_fresh_upi() {
        let mut fed = build_fed("cc-clear", 3);
        let upi = Upi::new("upi-600").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut check = CheckSession::new("c1", &["idp-1".into(), "idp-2".into()]);
        let mut peers = peers_for(&fed, 0);
        let outcome = cooperative_check(&mut check, &mut fed.idps[0], &upi, &mut cts, &mut peers, None).unwrap();
        assert_eq!(outcome, CheckOutcome::Clear);
        assert_eq!(fed.cts.borrow().registry.records().len(), 0);
    }

    #[test]
    fn cooperative_check_reconstructs_enrollment_pids() {
        for trial in 0..10 {
            let mut fed = build_fed(&format!("cc-recon-{trial}"), 3);
            let keys = user_keys(&format!("cc-recon-user-{trial}"));
            let upi = Upi::new(format!("upi-{trial}")).unwrap();
            let mut cts = DirectCts(fed.cts.clone());
            let mut s1 = EnrollmentSession::new("s1");
            first_enroll(
                &mut s1,
                &mut fed.idps[0],
                &upi,
                &keys.public(),
                &mut honest_signer(&keys),
                &mut cts,
                &KycOracle::pass_all(),
                None,
            )
            .unwrap();
            let mut check = CheckSession::new("c1", &["idp-0".into(), "idp-1".into()]);
            let mut peers = peers_for(&fed, 2);
            let outcome =
                cooperative_check(&mut check, &mut fed.idps[2], &upi, &mut cts, &mut peers, None).unwrap();
            assert_eq!(outcome, CheckOutcome::Matched(s1.pid().unwrap().clone()));
        }
    }

    #[test]
    fn cooperative_check_peer_down_aborts_fail_closed() {
        let mut fed = build_fed("cc-down", 3);
        let upi = Upi::new("upi-700").unwrap();
        let mut cts = DirectCts(fed.cts.clone());
        let mut check = CheckSession::new("c1", &["idp-1".into(), "idp-2".into()]);
        let mut peers = peers_for(&fed, 0);
        // take down the second peer
        peers[1] = Box::new(DirectPeer { id: "idp-2".into(), node: fed.nodes[2].clone(), available: false });
        let err =
            cooperative_check(&mut check, &mut fed.idps[0], &upi, &mut cts, &mut peers, None).unwrap_err();
        assert_eq!(err, ProtocolError::PeerUnavailable("idp-2".into()));
        assert_eq!(fed.cts.borrow().registry.records().len(), 0);
        assert!(check.secrets_erased());
    }

    #[test]
    fn enrollment_session_rejects_out_of_order_steps() {
        let fed = build_fed("phase", 1);
        let cts_pub = fed.cts.borrow().public();
        let mut rng = SeededRng::new(Seed::from_label("phase-rng"));
        let upi = Upi::new("upi-phase").unwrap();
        let mut session = EnrollmentSession::new("s");
        // transform before blind
        assert!(matches!(
            session.transform(&fed.idps[0].cred, &cts_pub),
            Err(ProtocolError::OutOfPhase { .. })
        ));
        session.blind_input(&upi, &cts_pub, &mut rng, None).unwrap();
        // blind twice
        assert!(matches!(
            session.blind_input(&upi, &cts_pub, &mut rng, None),
            Err(ProtocolError::OutOfPhase { .. })
        ));
        // unblind before eval
        assert!(matches!(
            session.unblind(&fed.idps[0].cred, &cts_pub),
            Err(ProtocolError::OutOfPhase { .. })
        ));
        session.transform(&fed.idps[0].cred, &cts_pub).unwrap();
        assert!(matches!(session.complete(), Err(ProtocolError::OutOfPhase { .. })));
        session.reject();
        assert!(session.secrets_erased());
        assert!(matches!(session.absorb_eval(Natural::one()), Err(ProtocolError::OutOfPhase { .. })));
    }

    #[test]
    fn directory_file_round_trip() {
        let fed = build_fed("dir-file", 3);
        let dir = fed.cts.borrow().directory.clone();
        let text = dir.to_file();
        assert!(text.starts_with("cts_n="));
        let back = FederationDirectory::from_file(&text).unwrap();
        assert_eq!(dir, back);
        assert!(FederationDirectory::from_file("garbage\n").is_err());
    }
}
