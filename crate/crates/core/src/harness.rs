//! Deterministic federation simulator: builds a toy federation, drives
//! scripted and randomized scenarios (honest and adversarial), records every
//! inter-role message as a transcript, and audits the transcript for leakage.
//!
//! Everything is seeded; a fixed [`SimConfig`] reproduces the same report
//! and the same transcript byte for byte. The same scenario driver runs
//! against in-process nodes or against live TCP services, so semantic
//! equivalence of the two deployments is testable.

use crate::credentials::{respond, Challenge, Token, UserKeyPair};
use crate::numcore::{fdh_hash, mod_pow, Natural, PublicKey, Seed, SeededRng};
use crate::numcore::{NumError, RsaKeyPair};
use crate::oprfcore::{DomainCredential, Pid};
use crate::protocol::{
    cooperative_check, first_enroll, subsequent_enroll, CheckOutcome, CheckSession, CtsClient,
    CtsNode, EnrollmentSession, FederationDirectory, IdpContext, IdpNode, KycOracle, PeerClient,
    ProtocolError, SecretsTap, Upi,
};
use crate::wire::{
    self, error_envelope, protocol_error_code, Envelope, Message, ServiceHandle, ServiceRole,
    WireCtsClient, WireError, WirePeerClient,
};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("bad simulator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// The closed set of built-in scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Honest,
    DuplicateNoToken,
    DuplicateWithOwnToken,
    StolenToken,
    ForgedToken,
    KycFail,
    PeerDownDuringCheck,
    RandomizedMixed,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Honest,
        Scenario::DuplicateNoToken,
        Scenario::DuplicateWithOwnToken,
        Scenario::StolenToken,
        Scenario::ForgedToken,
        Scenario::KycFail,
        Scenario::PeerDownDuringCheck,
        Scenario::RandomizedMixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Honest => "honest",
            Scenario::DuplicateNoToken => "duplicate-no-token",
            Scenario::DuplicateWithOwnToken => "duplicate-with-own-token",
            Scenario::StolenToken => "stolen-token",
            Scenario::ForgedToken => "forged-token",
            Scenario::KycFail => "kyc-fail",
            Scenario::PeerDownDuringCheck => "peer-down-during-check",
            Scenario::RandomizedMixed => "randomized-mixed",
        }
    }

    pub fn from_name(name: &str) -> Result<Scenario, HarnessError> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| HarnessError::UnknownScenario(name.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_idps: usize,
    pub n_users: usize,
    pub key_bits: u64,
    pub seed: Seed,
    pub scenario: Scenario,
    /// Test-only broken variant: additionally sends one raw (unblinded)
    /// hash to the master service and to a peer, to prove the leakage audit
    /// detects violations.
    pub mutant: bool,
}

impl SimConfig {
    pub fn new(scenario: Scenario, seed: Seed) -> SimConfig {
        SimConfig { n_idps: 3, n_users: 3, key_bits: 64, seed, scenario, mutant: false }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.n_idps < 1 {
            return Err(HarnessError::BadConfig("n_idps must be >= 1".into()));
        }
        if self.key_bits < 16 {
            return Err(HarnessError::BadConfig("key_bits must be >= 16".into()));
        }
        if self.n_users < 1 {
            return Err(HarnessError::BadConfig("n_users must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ordered record of every inter-role message in a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub from: String,
    pub to: String,
    pub env: Envelope,
}

impl Transcript {
    fn record(&mut self, from: &str, to: &str, env: Envelope) {
        self.entries.push(TranscriptEntry { from: from.to_string(), to: to.to_string(), env });
    }

    /// One line per message: `from->to <envelope-json>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}->{} {}", e.from, e.to, wire::encode(&e.env)));
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimReport {
    pub enrollments_ok: u64,
    pub duplicates_attempted: u64,
    pub duplicates_detected: u64,
    pub false_alarms: u64,
    pub leakage_violations: u64,
    pub registry_ok: u64,
    pub registry_alarm: u64,
    pub registry_total: u64,
}

impl SimReport {
    pub fn to_text(&self) -> String {
        format!(
            "enrollments_ok={}\nduplicates_attempted={}\nduplicates_detected={}\n\
             false_alarms={}\nleakage_violations={}\nregistry_ok={}\nregistry_alarm={}\n\
             registry_total={}\n",
            self.enrollments_ok,
            self.duplicates_attempted,
            self.duplicates_detected,
            self.false_alarms,
            self.leakage_violations,
            self.registry_ok,
            self.registry_alarm,
            self.registry_total
        )
    }
}

/// Everything a run produces.
#[derive(Debug)]
pub struct SimOutput {
    pub report: SimReport,
    pub transcript: Transcript,
    pub registry_log: String,
}

// ---------------------------------------------------------------------------
// Federation construction

pub struct FederationMember {
    pub id: String,
    pub node: Arc<Mutex<IdpNode>>,
    pub cred: DomainCredential,
}

pub struct Federation {
    pub cts: Arc<Mutex<CtsNode>>,
    pub members: Vec<FederationMember>,
    pub directory: FederationDirectory,
}

/// Child seed derived by label, so every actor gets an independent stream.
pub fn subseed(seed: &Seed, label: &str) -> Seed {
    let mut rng = SeededRng::new(*seed).fork(label);
    let bytes: [u8; 32] = rng.bytes(32).try_into().expect("32 bytes");
    Seed::from_bytes(bytes)
}

pub fn build_federation(
    n_idps: usize,
    key_bits: u64,
    seed: &Seed,
) -> Result<Federation, HarnessError> {
    let key = RsaKeyPair::generate(key_bits, subseed(seed, "cts-key"))?;
    let cts_pub = key.public();
    let mut cts = CtsNode::new(key, SeededRng::new(*seed).fork("cts-rng"));
    let mut members = Vec::new();
    for i in 1..=n_idps {
        let id = format!("idp-{i}");
        let cred = cts.onboard_idp(&id)?;
        members.push((id, cred));
    }
    let directory = cts.directory.clone();
    let members = members
        .into_iter()
        .map(|(id, cred)| FederationMember {
            node: Arc::new(Mutex::new(IdpNode::new(cred.clone(), cts_pub.clone()))),
            id,
            cred,
        })
        .collect();
    Ok(Federation { cts: Arc::new(Mutex::new(cts)), members, directory })
}

impl Federation {
    /// Per-IdP enrolling-side contexts, seeded independently of the nodes.
    pub fn contexts(&self, seed: &Seed) -> Vec<IdpContext> {
        self.members
            .iter()
            .map(|m| {
                IdpContext::new(
                    m.cred.clone(),
                    self.directory.clone(),
                    SeededRng::new(*seed).fork(&format!("idp-rng-{}", m.id)),
                )
            })
            .collect()
    }

    pub fn registry_log(&self) -> String {
        self.cts.lock().unwrap().registry.to_log()
    }
}

// ---------------------------------------------------------------------------
// Backends: how the driver reaches the services

pub trait Backend {
    fn cts_client(&mut self, from: &str) -> Result<Box<dyn CtsClient>, ProtocolError>;
    fn peer_client(&mut self, from: &str, peer_id: &str)
        -> Result<Box<dyn PeerClient>, ProtocolError>;
    fn set_down(&mut self, peer_id: &str, down: bool);
}

fn env(sid: &str, msg: Message) -> Envelope {
    Envelope { session_id: sid.to_string(), msg }
}

/// Wraps any [`CtsClient`] and records the envelopes the exchange would put
/// on the wire, in order, including error replies.
struct RecordingCts {
    inner: Box<dyn CtsClient>,
    from: String,
    log: Rc<RefCell<Transcript>>,
}

impl RecordingCts {
    fn reply(&self, sid: &str, msg: Message) {
        self.log.borrow_mut().record("cts", &self.from, env(sid, msg));
    }

    fn reply_err(&self, sid: &str, e: &ProtocolError) {
        self.log.borrow_mut().record("cts", &self.from, error_envelope(sid, protocol_error_code(e)));
    }

    fn request(&self, sid: &str, msg: Message) {
        self.log.borrow_mut().record(&self.from, "cts", env(sid, msg));
    }
}

impl CtsClient for RecordingCts {
    fn eval(&mut self, sid: &str, x: &Natural) -> Result<Natural, ProtocolError> {
        self.request(sid, Message::EvalRequest { x: x.clone() });
        match self.inner.eval(sid, x) {
            Ok(y) => {
                self.reply(sid, Message::EvalResponse { y: y.clone() });
                Ok(y)
            }
            Err(e) => {
                self.reply_err(sid, &e);
                Err(e)
            }
        }
    }

    fn token_issue(
        &mut self,
        sid: &str,
        pid: &Pid,
        user_pub: &PublicKey,
        signer: &mut crate::protocol::ChallengeSigner<'_>,
    ) -> Result<Token, ProtocolError> {
        self.request(
            sid,
            Message::TokenIssueRequest {
                pid: pid.value().clone(),
                user_n: user_pub.modulus_n.clone(),
                user_e: user_pub.public_e.clone(),
            },
        );
        let log = self.log.clone();
        let from = self.from.clone();
        let sid_owned = sid.to_string();
        let mut wrapped = |c: &Challenge| {
            log.borrow_mut().record(
                "cts",
                &from,
                env(&sid_owned, Message::Challenge { nonce: c.nonce }),
            );
            let sig = signer(c)?;
            log.borrow_mut().record(
                &from,
                "cts",
                env(&sid_owned, Message::ChallengeResponse { sig: sig.clone() }),
            );
            Ok(sig)
        };
        match self.inner.token_issue(sid, pid, user_pub, &mut wrapped) {
            Ok(token) => {
                self.reply(
                    sid,
                    Message::TokenIssueResponse {
                        pid: token.pid.value().clone(),
                        user_n: token.user_pub.modulus_n.clone(),
                        user_e: token.user_pub.public_e.clone(),
                        sig: token.signature.clone(),
                    },
                );
                Ok(token)
            }
            Err(e) => {
                self.reply_err(sid, &e);
                Err(e)
            }
        }
    }

    fn registry_match(&mut self, sid: &str, pids: &[Pid]) -> Result<Option<Pid>, ProtocolError> {
        self.request(
            sid,
            Message::RegistryMatchRequest {
                pids: pids.iter().map(|p| p.value().clone()).collect(),
            },
        );
        match self.inner.registry_match(sid, pids) {
            Ok(matched) => {
                self.reply(
                    sid,
                    Message::RegistryMatchResponse {
                        matched_pid: matched.as_ref().map(|p| p.value().clone()),
                    },
                );
                Ok(matched)
            }
            Err(e) => {
                self.reply_err(sid, &e);
                Err(e)
            }
        }
    }

    fn alarm_insert(&mut self, sid: &str, pid: &Pid) -> Result<(), ProtocolError> {
        self.request(sid, Message::AlarmInsert { pid: pid.value().clone() });
        match self.inner.alarm_insert(sid, pid) {
            Ok(()) => {
                self.reply(sid, Message::Ack);
                Ok(())
            }
            Err(e) => {
                self.reply_err(sid, &e);
                Err(e)
            }
        }
    }
}

struct RecordingPeer {
    inner: Box<dyn PeerClient>,
    from: String,
    log: Rc<RefCell<Transcript>>,
}

impl PeerClient for RecordingPeer {
    fn idp_id(&self) -> &str {
        self.inner.idp_id()
    }

    fn transform(&mut self, sid: &str, x: &Natural) -> Result<Natural, ProtocolError> {
        let to = self.inner.idp_id().to_string();
        self.log.borrow_mut().record(&self.from, &to, env(sid, Message::TransformRequest {
            x: x.clone(),
        }));
        match self.inner.transform(sid, x) {
            Ok(t) => {
                self.log.borrow_mut().record(&to, &self.from, env(sid, Message::TransformResponse {
                    t: t.clone(),
                }));
                Ok(t)
            }
            Err(e) => {
                self.log
                    .borrow_mut()
                    .record(&to, &self.from, error_envelope(sid, protocol_error_code(&e)));
                Err(e)
            }
        }
    }

    fn exchange(&mut self, sid: &str, m: &Natural) -> Result<Natural, ProtocolError> {
        let to = self.inner.idp_id().to_string();
        self.log.borrow_mut().record(&self.from, &to, env(sid, Message::ExchangeRequest {
            m: m.clone(),
        }));
        match self.inner.exchange(sid, m) {
            Ok(s) => {
                self.log.borrow_mut().record(&to, &self.from, env(sid, Message::ExchangeResponse {
                    s: s.clone(),
                }));
                Ok(s)
            }
            Err(e) => {
                self.log
                    .borrow_mut()
                    .record(&to, &self.from, error_envelope(sid, protocol_error_code(&e)));
                Err(e)
            }
        }
    }
}

struct DirectCtsClient {
    node: Arc<Mutex<CtsNode>>,
}

impl CtsClient for DirectCtsClient {
    fn eval(&mut self, _sid: &str, x: &Natural) -> Result<Natural, ProtocolError> {
        self.node.lock().unwrap().eval(x)
    }

    fn token_issue(
        &mut self,
        _sid: &str,
        pid: &Pid,
        user_pub: &PublicKey,
        signer: &mut crate::protocol::ChallengeSigner<'_>,
    ) -> Result<Token, ProtocolError> {
        let challenge =
            self.node.lock().unwrap().begin_token_issue(pid.clone(), user_pub.clone());
        let sig = signer(&challenge)?;
        self.node.lock().unwrap().finish_token_issue(&challenge.nonce, &sig)
    }

    fn registry_match(&mut self, _sid: &str, pids: &[Pid]) -> Result<Option<Pid>, ProtocolError> {
        Ok(self.node.lock().unwrap().registry_match(pids))
    }

    fn alarm_insert(&mut self, _sid: &str, pid: &Pid) -> Result<(), ProtocolError> {
        self.node.lock().unwrap().alarm_insert(pid)
    }
}

struct DirectPeerClient {
    id: String,
    node: Arc<Mutex<IdpNode>>,
}

impl PeerClient for DirectPeerClient {
    fn idp_id(&self) -> &str {
        &self.id
    }

    fn transform(&mut self, _sid: &str, x: &Natural) -> Result<Natural, ProtocolError> {
        self.node.lock().unwrap().transform(x)
    }

    fn exchange(&mut self, _sid: &str, m: &Natural) -> Result<Natural, ProtocolError> {
        self.node.lock().unwrap().exchange(m)
    }
}

/// Stand-in for a peer that is not responding.
struct DownPeerClient {
    id: String,
}

impl PeerClient for DownPeerClient {
    fn idp_id(&self) -> &str {
        &self.id
    }

    fn transform(&mut self, _sid: &str, _x: &Natural) -> Result<Natural, ProtocolError> {
        Err(ProtocolError::PeerUnavailable(self.id.clone()))
    }

    fn exchange(&mut self, _sid: &str, _m: &Natural) -> Result<Natural, ProtocolError> {
        Err(ProtocolError::PeerUnavailable(self.id.clone()))
    }
}

pub struct InProcessBackend {
    cts: Arc<Mutex<CtsNode>>,
    idps: Vec<(String, Arc<Mutex<IdpNode>>)>,
    down: HashSet<String>,
    log: Rc<RefCell<Transcript>>,
}

impl InProcessBackend {
    pub fn new(fed: &Federation, log: Rc<RefCell<Transcript>>) -> InProcessBackend {
        InProcessBackend {
            cts: fed.cts.clone(),
            idps: fed.members.iter().map(|m| (m.id.clone(), m.node.clone())).collect(),
            down: HashSet::new(),
            log,
        }
    }
}

impl Backend for InProcessBackend {
    fn cts_client(&mut self, from: &str) -> Result<Box<dyn CtsClient>, ProtocolError> {
        Ok(Box::new(RecordingCts {
            inner: Box::new(DirectCtsClient { node: self.cts.clone() }),
            from: from.to_string(),
            log: self.log.clone(),
        }))
    }

    fn peer_client(
        &mut self,
        from: &str,
        peer_id: &str,
    ) -> Result<Box<dyn PeerClient>, ProtocolError> {
        let inner: Box<dyn PeerClient> = if self.down.contains(peer_id) {
            Box::new(DownPeerClient { id: peer_id.to_string() })
        } else {
            let node = self
                .idps
                .iter()
                .find(|(id, _)| id == peer_id)
                .map(|(_, n)| n.clone())
                .ok_or_else(|| ProtocolError::PeerUnavailable(peer_id.to_string()))?;
            Box::new(DirectPeerClient { id: peer_id.to_string(), node })
        };
        Ok(Box::new(RecordingPeer { inner, from: from.to_string(), log: self.log.clone() }))
    }

    fn set_down(&mut self, peer_id: &str, down: bool) {
        if down {
            self.down.insert(peer_id.to_string());
        } else {
            self.down.remove(peer_id);
        }
    }
}

/// Runs the same federation as TCP services on loopback and reaches them
/// through wire clients.
pub struct WireBackend {
    cts_addr: String,
    peers: Vec<(String, String)>,
    down: HashSet<String>,
    log: Rc<RefCell<Transcript>>,
    _handles: Vec<ServiceHandle>,
}

impl WireBackend {
    pub fn start(fed: &Federation, log: Rc<RefCell<Transcript>>) -> Result<WireBackend, HarnessError> {
        let mut handles = Vec::new();
        let cts_handle = wire::serve(ServiceRole::Cts(fed.cts.clone()), "127.0.0.1:0")?;
        let cts_addr = cts_handle.local_addr().to_string();
        handles.push(cts_handle);
        let mut peers = Vec::new();
        for m in &fed.members {
            let handle = wire::serve(ServiceRole::Idp(m.node.clone()), "127.0.0.1:0")?;
            peers.push((m.id.clone(), handle.local_addr().to_string()));
            handles.push(handle);
        }
        Ok(WireBackend { cts_addr, peers, down: HashSet::new(), log, _handles: handles })
    }
}

impl Backend for WireBackend {
    fn cts_client(&mut self, from: &str) -> Result<Box<dyn CtsClient>, ProtocolError> {
        Ok(Box::new(RecordingCts {
            inner: Box::new(WireCtsClient::connect(&self.cts_addr)?),
            from: from.to_string(),
            log: self.log.clone(),
        }))
    }

    fn peer_client(
        &mut self,
        from: &str,
        peer_id: &str,
    ) -> Result<Box<dyn PeerClient>, ProtocolError> {
        let inner: Box<dyn PeerClient> = if self.down.contains(peer_id) {
            Box::new(DownPeerClient { id: peer_id.to_string() })
        } else {
            let addr = self
                .peers
                .iter()
                .find(|(id, _)| id == peer_id)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| ProtocolError::PeerUnavailable(peer_id.to_string()))?;
            Box::new(WirePeerClient::connect(peer_id, &addr)?)
        };
        Ok(Box::new(RecordingPeer { inner, from: from.to_string(), log: self.log.clone() }))
    }

    fn set_down(&mut self, peer_id: &str, down: bool) {
        if down {
            self.down.insert(peer_id.to_string());
        } else {
            self.down.remove(peer_id);
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario driver

struct Driver<'a> {
    ids: Vec<String>,
    contexts: Vec<IdpContext>,
    backend: &'a mut dyn Backend,
    kyc: KycOracle,
    tap: SecretsTap,
    enrolled: HashSet<Vec<u8>>,
    enrollments_ok: u64,
    duplicates_attempted: u64,
    duplicates_detected: u64,
    false_alarms: u64,
    next_session: u64,
}

/// Errors that are the scenario's point, not harness failures.
fn is_rejection(e: &ProtocolError) -> bool {
    matches!(
        e,
        ProtocolError::KycFailed
            | ProtocolError::ProofOfPossessionFailed
            | ProtocolError::InvalidToken
            | ProtocolError::PeerUnavailable(_)
            | ProtocolError::StaleNonce
            | ProtocolError::RegistryConflict(_)
            | ProtocolError::Remote { .. }
    )
}

fn tolerate<T>(result: Result<T, ProtocolError>) -> Result<(), HarnessError> {
    match result {
        Ok(_) => Ok(()),
        Err(e) if is_rejection(&e) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

impl Driver<'_> {
    fn sid(&mut self) -> String {
        self.next_session += 1;
        format!("s-{:04}", self.next_session)
    }

    fn enroll_first(
        &mut self,
        idx: usize,
        upi: &Upi,
        user: &UserKeyPair,
    ) -> Result<Token, ProtocolError> {
        let sid = self.sid();
        let mut session = EnrollmentSession::new(sid);
        let mut cts = self.backend.cts_client(&self.ids[idx])?;
        let mut signer = |c: &Challenge| respond(c, user).map_err(ProtocolError::from);
        let user_pub = user.public();
        let out = first_enroll(
            &mut session,
            &mut self.contexts[idx],
            upi,
            &user_pub,
            &mut signer,
            cts.as_mut(),
            &self.kyc,
            Some(&mut self.tap),
        );
        debug_assert!(session.secrets_erased());
        if out.is_ok() {
            self.enrollments_ok += 1;
            self.enrolled.insert(upi.as_bytes().to_vec());
        }
        out
    }

    fn enroll_with_token(
        &mut self,
        idx: usize,
        upi: &Upi,
        presented: &Token,
        possessor: &UserKeyPair,
    ) -> Result<Token, ProtocolError> {
        let sid = self.sid();
        let mut session = EnrollmentSession::new(sid);
        let mut cts = self.backend.cts_client(&self.ids[idx])?;
        let mut signer = |c: &Challenge| respond(c, possessor).map_err(ProtocolError::from);
        let out = subsequent_enroll(
            &mut session,
            &mut self.contexts[idx],
            upi,
            presented,
            &mut signer,
            cts.as_mut(),
            &self.kyc,
            Some(&mut self.tap),
        );
        debug_assert!(session.secrets_erased());
        if out.is_ok() {
            self.enrollments_ok += 1;
            self.enrolled.insert(upi.as_bytes().to_vec());
        }
        out
    }

    fn check(&mut self, idx: usize, upi: &Upi) -> Result<CheckOutcome, ProtocolError> {
        let sid = self.sid();
        let own = self.ids[idx].clone();
        let peer_ids: Vec<String> =
            self.ids.iter().filter(|id| **id != own).cloned().collect();
        let mut session = CheckSession::new(sid, &peer_ids);
        let mut peers: Vec<Box<dyn PeerClient>> = Vec::new();
        for id in &peer_ids {
            peers.push(self.backend.peer_client(&own, id)?);
        }
        let mut cts = self.backend.cts_client(&own)?;
        let was_enrolled = self.enrolled.contains(upi.as_bytes());
        if was_enrolled {
            self.duplicates_attempted += 1;
        }
        let out = cooperative_check(
            &mut session,
            &mut self.contexts[idx],
            upi,
            cts.as_mut(),
            &mut peers,
            Some(&mut self.tap),
        );
        debug_assert!(session.secrets_erased());
        if let Ok(CheckOutcome::Matched(_)) = &out {
            if was_enrolled {
                self.duplicates_detected += 1;
            } else {
                self.false_alarms += 1;
            }
        }
        out
    }

    /// Token-less registration: cooperative check first, enroll on clear.
    fn token_less(
        &mut self,
        idx: usize,
        upi: &Upi,
        user: &UserKeyPair,
    ) -> Result<Option<Token>, ProtocolError> {
        match self.check(idx, upi)? {
            CheckOutcome::Clear => Ok(Some(self.enroll_first(idx, upi, user)?)),
            _ => Ok(None),
        }
    }

    /// The deliberately broken variant: raw hash straight to the master
    /// service and to a peer.
    fn leak_raw(&mut self, upi: &Upi, cts_pub: &PublicKey) -> Result<(), HarnessError> {
        let x = fdh_hash(upi.as_bytes(), cts_pub)?;
        let sid = "s-mutant".to_string();
        let mut cts = self.backend.cts_client(&self.ids[0])?;
        tolerate(cts.eval(&sid, &x))?;
        if self.ids.len() > 1 {
            let from = self.ids[0].clone();
            let to = self.ids[1].clone();
            let mut peer = self.backend.peer_client(&from, &to)?;
            tolerate(peer.transform(&sid, &x))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Leakage audit

/// Every secret of a run, known to the harness because it created them.
pub struct SecretsOracle {
    pub x_values: HashSet<Natural>,
    pub x_d_values: HashSet<Natural>,
    pub blinding_factors: HashSet<Natural>,
    /// (idp id, pid value) for every (user, domain) pair.
    pub pids: Vec<(String, Natural)>,
}

impl SecretsOracle {
    pub fn build(fed: &Federation, upis: &[Upi], tap: &SecretsTap) -> Result<SecretsOracle, HarnessError> {
        let cts_pub = fed.directory.cts_pub.clone();
        let (d, n) = {
            let cts = fed.cts.lock().unwrap();
            (cts.key().private_d.clone(), cts.key().modulus_n.clone())
        };
        let mut x_values = HashSet::new();
        let mut x_d_values = HashSet::new();
        let mut pids = Vec::new();
        for upi in upis {
            let x = fdh_hash(upi.as_bytes(), &cts_pub)?;
            let x_d = mod_pow(&x, &d, &n)?;
            for m in &fed.members {
                pids.push((m.id.clone(), mod_pow(&x_d, &m.cred.t_private, &n)?));
            }
            x_values.insert(x);
            x_d_values.insert(x_d);
        }
        let mut blinding_factors: HashSet<Natural> =
            tap.blinding_factors.iter().cloned().collect();
        blinding_factors.extend(tap.exchange_blinders.iter().cloned());
        Ok(SecretsOracle { x_values, x_d_values, blinding_factors, pids })
    }
}

/// Counts fields a role received but must never learn: the master service
/// must never see `x` or `x^d`; a peer answering transform/exchange requests
/// must never see `x`, `x^d`, any blinding factor, or another domain's pid.
pub fn audit_blindness(transcript: &Transcript, secrets: &SecretsOracle) -> u64 {
    let mut violations = 0u64;
    for entry in &transcript.entries {
        let fields = entry.env.msg.natural_fields();
        if entry.to == "cts" {
            violations += fields
                .iter()
                .filter(|v| secrets.x_values.contains(*v) || secrets.x_d_values.contains(*v))
                .count() as u64;
        } else if matches!(
            entry.env.msg,
            Message::TransformRequest { .. } | Message::ExchangeRequest { .. }
        ) {
            violations += fields
                .iter()
                .filter(|v| {
                    secrets.x_values.contains(*v)
                        || secrets.x_d_values.contains(*v)
                        || secrets.blinding_factors.contains(*v)
                        || secrets
                            .pids
                            .iter()
                            .any(|(id, pid)| *id != entry.to && pid == **v)
                })
                .count() as u64;
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Scenario runs

pub fn run_scenario(config: &SimConfig) -> Result<SimOutput, HarnessError> {
    config.validate()?;
    let fed = build_federation(config.n_idps, config.key_bits, &config.seed)?;
    let log = Rc::new(RefCell::new(Transcript::default()));
    let mut backend = InProcessBackend::new(&fed, log.clone());
    run_with_backend(config, &fed, &mut backend, log)
}

/// Same scenario, but every role reached through live loopback services.
pub fn run_scenario_wire(config: &SimConfig) -> Result<SimOutput, HarnessError> {
    config.validate()?;
    let fed = build_federation(config.n_idps, config.key_bits, &config.seed)?;
    let log = Rc::new(RefCell::new(Transcript::default()));
    let mut backend = WireBackend::start(&fed, log.clone())?;
    run_with_backend(config, &fed, &mut backend, log)
}

fn run_with_backend(
    config: &SimConfig,
    fed: &Federation,
    backend: &mut dyn Backend,
    log: Rc<RefCell<Transcript>>,
) -> Result<SimOutput, HarnessError> {
    let n = config.n_idps;
    let mut users = Vec::new();
    for i in 0..config.n_users {
        let upi = Upi::new(format!("UPI-{i:04}").into_bytes())?;
        let key = UserKeyPair::generate(config.key_bits, subseed(&config.seed, &format!("user-{i}")))?;
        users.push((upi, key));
    }

    // mixed scenario: fix each user's behavior up front so the KYC oracle
    // can be built before the run
    let behaviors: Vec<u8> = if config.scenario == Scenario::RandomizedMixed {
        let mut rng = SeededRng::new(config.seed).fork("scenario");
        users.iter().map(|_| (rng.next_u64() % 6) as u8).collect()
    } else {
        Vec::new()
    };
    let kyc = match config.scenario {
        Scenario::KycFail => KycOracle::failing([users[0].0.clone()]),
        Scenario::RandomizedMixed => KycOracle::failing(
            users
                .iter()
                .zip(&behaviors)
                .filter(|(_, b)| **b == 3)
                .map(|((upi, _), _)| upi.clone()),
        ),
        _ => KycOracle::pass_all(),
    };

    let mut driver = Driver {
        ids: fed.members.iter().map(|m| m.id.clone()).collect(),
        contexts: fed.contexts(&config.seed),
        backend,
        kyc,
        tap: SecretsTap::default(),
        enrolled: HashSet::new(),
        enrollments_ok: 0,
        duplicates_attempted: 0,
        duplicates_detected: 0,
        false_alarms: 0,
        next_session: 0,
    };

    let honest_rest = |driver: &mut Driver, from: usize| -> Result<(), HarnessError> {
        for (i, (upi, user)) in users.iter().enumerate().skip(from) {
            tolerate(driver.token_less(i % n, upi, user))?;
        }
        Ok(())
    };

    match config.scenario {
        Scenario::Honest => honest_rest(&mut driver, 0)?,
        Scenario::DuplicateNoToken => {
            let (upi0, user0) = &users[0];
            tolerate(driver.token_less(0, upi0, user0))?;
            tolerate(driver.token_less(1 % n, upi0, user0))?;
            honest_rest(&mut driver, 1)?;
        }
        Scenario::DuplicateWithOwnToken => {
            let (upi0, user0) = &users[0];
            if let Some(token) = driver.token_less(0, upi0, user0)? {
                tolerate(driver.enroll_with_token(1 % n, upi0, &token, user0))?;
            }
            honest_rest(&mut driver, 1)?;
        }
        Scenario::StolenToken => {
            let (upi0, user0) = &users[0];
            let token = driver.token_less(0, upi0, user0)?;
            if let (Some(token), true) = (token, users.len() > 1) {
                // thief holds the token but not the bound private key
                let (thief_upi, thief_key) = &users[1];
                tolerate(driver.enroll_with_token(1 % n, thief_upi, &token, thief_key))?;
            }
            honest_rest(&mut driver, 2)?;
        }
        Scenario::ForgedToken => {
            let (upi0, user0) = &users[0];
            tolerate(driver.token_less(0, upi0, user0))?;
            if users.len() > 1 {
                let mut rng = SeededRng::new(config.seed).fork("forger");
                let modulus = fed.directory.cts_pub.modulus_n.clone();
                let (forger_upi, forger_key) = &users[1];
                let forged = Token {
                    pid: Pid(rng.natural_below(&modulus)),
                    user_pub: forger_key.public(),
                    signature: rng.natural_below(&modulus),
                };
                tolerate(driver.enroll_with_token(1 % n, forger_upi, &forged, forger_key))?;
            }
            honest_rest(&mut driver, 2)?;
        }
        Scenario::KycFail => {
            let (upi0, user0) = &users[0];
            tolerate(driver.token_less(0, upi0, user0))?;
            honest_rest(&mut driver, 1)?;
        }
        Scenario::PeerDownDuringCheck => {
            let (upi0, user0) = &users[0];
            tolerate(driver.token_less(0, upi0, user0))?;
            if users.len() > 1 && n > 1 {
                let idx = 1 % n;
                let down = driver.ids.iter().position(|id| *id != driver.ids[idx]).unwrap();
                let down_id = driver.ids[down].clone();
                driver.backend.set_down(&down_id, true);
                let (upi1, user1) = &users[1];
                tolerate(driver.token_less(idx, upi1, user1))?;
                driver.backend.set_down(&down_id, false);
            }
            honest_rest(&mut driver, 2)?;
        }
        Scenario::RandomizedMixed => {
            for (i, (upi, user)) in users.iter().enumerate() {
                let idx = i % n;
                let other = (i + 1) % n;
                match behaviors[i] {
                    0 | 3 => tolerate(driver.token_less(idx, upi, user))?,
                    1 => {
                        if let Some(token) = driver.token_less(idx, upi, user)? {
                            tolerate(driver.enroll_with_token(other, upi, &token, user))?;
                        }
                    }
                    2 => {
                        tolerate(driver.token_less(idx, upi, user))?;
                        tolerate(driver.token_less(other, upi, user))?;
                    }
                    4 => {
                        let token = driver.token_less(idx, upi, user)?;
                        if let Some(token) = token {
                            let thief_upi = Upi::new(format!("THIEF-{i:04}").into_bytes())?;
                            let thief_key = UserKeyPair::generate(
                                config.key_bits,
                                subseed(&config.seed, &format!("thief-{i}")),
                            )?;
                            tolerate(driver.enroll_with_token(
                                other, &thief_upi, &token, &thief_key,
                            ))?;
                        }
                    }
                    _ => {
                        if n > 1 {
                            let down = driver
                                .ids
                                .iter()
                                .position(|id| *id != driver.ids[idx])
                                .unwrap();
                            let down_id = driver.ids[down].clone();
                            driver.backend.set_down(&down_id, true);
                            tolerate(driver.token_less(idx, upi, user))?;
                            driver.backend.set_down(&down_id, false);
                        } else {
                            tolerate(driver.token_less(idx, upi, user))?;
                        }
                    }
                }
            }
        }
    }

    if config.mutant {
        let upi = users[0].0.clone();
        let cts_pub = fed.directory.cts_pub.clone();
        driver.leak_raw(&upi, &cts_pub)?;
    }

    let tap = driver.tap.clone();
    let mut report = SimReport {
        enrollments_ok: driver.enrollments_ok,
        duplicates_attempted: driver.duplicates_attempted,
        duplicates_detected: driver.duplicates_detected,
        false_alarms: driver.false_alarms,
        ..SimReport::default()
    };
    let transcript = log.borrow().clone();
    let upis: Vec<Upi> = users.iter().map(|(u, _)| u.clone()).collect();
    let oracle = SecretsOracle::build(fed, &upis, &tap)?;
    report.leakage_violations = audit_blindness(&transcript, &oracle);
    let (ok, alarm, total) = fed.cts.lock().unwrap().registry.summary();
    report.registry_ok = ok as u64;
    report.registry_alarm = alarm as u64;
    report.registry_total = total as u64;

    Ok(SimOutput { report, transcript, registry_log: fed.registry_log() })
}
