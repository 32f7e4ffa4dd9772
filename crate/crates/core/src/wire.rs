//! Message schema, newline-delimited framing, and the TCP binding that runs
//! the master service and identity providers as networked services.
//!
//! One JSON object per line, UTF-8, newline-terminated. Every number-valued
//! field is lowercase hex without leading zeros (`"0"` for zero); `0x`
//! prefixes are rejected. The message set is closed and unknown fields are
//! rejected. Error envelopes carry a fixed code catalogue and never echo
//! protocol values.

use crate::credentials::{Challenge, Token, CHALLENGE_CONTEXT};
use crate::numcore::{from_hex, to_hex, Natural, PublicKey};
use crate::oprfcore::Pid;
use crate::protocol::{
    ChallengeSigner, CtsClient, CtsNode, IdpNode, PeerClient, ProtocolError,
};
use crate::registry::RegistryError;
use serde_json::{json, Map, Value};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("bad hex in field {0}")]
    BadHex(String),
    #[error("bind failure: {0}")]
    BindFailure(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("io: {0}")]
    Io(String),
}

/// One protocol message with its session tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub session_id: String,
    pub msg: Message,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    EvalRequest { x: Natural },
    EvalResponse { y: Natural },
    TransformRequest { x: Natural },
    TransformResponse { t: Natural },
    ExchangeRequest { m: Natural },
    ExchangeResponse { s: Natural },
    Challenge { nonce: [u8; 32] },
    ChallengeResponse { sig: Natural },
    TokenIssueRequest { pid: Natural, user_n: Natural, user_e: Natural },
    TokenIssueResponse { pid: Natural, user_n: Natural, user_e: Natural, sig: Natural },
    RegistryMatchRequest { pids: Vec<Natural> },
    RegistryMatchResponse { matched_pid: Option<Natural> },
    AlarmInsert { pid: Natural },
    Ack,
    Error { code: String, detail: String },
}

impl Message {
    pub fn type_tag(&self) -> &'static str {
        match self {
            Message::EvalRequest { .. } => "eval_request",
            Message::EvalResponse { .. } => "eval_response",
            Message::TransformRequest { .. } => "transform_request",
            Message::TransformResponse { .. } => "transform_response",
            Message::ExchangeRequest { .. } => "exchange_request",
            Message::ExchangeResponse { .. } => "exchange_response",
            Message::Challenge { .. } => "challenge",
            Message::ChallengeResponse { .. } => "challenge_response",
            Message::TokenIssueRequest { .. } => "token_issue_request",
            Message::TokenIssueResponse { .. } => "token_issue_response",
            Message::RegistryMatchRequest { .. } => "registry_match_request",
            Message::RegistryMatchResponse { .. } => "registry_match_response",
            Message::AlarmInsert { .. } => "alarm_insert",
            Message::Ack => "ack",
            Message::Error { .. } => "error",
        }
    }

    /// Every number-valued field in the message, for transcript audits.
    pub fn natural_fields(&self) -> Vec<&Natural> {
        match self {
            Message::EvalRequest { x } | Message::TransformRequest { x } => vec![x],
            Message::EvalResponse { y } => vec![y],
            Message::TransformResponse { t } => vec![t],
            Message::ExchangeRequest { m } => vec![m],
            Message::ExchangeResponse { s } => vec![s],
            Message::ChallengeResponse { sig } => vec![sig],
            Message::TokenIssueRequest { pid, user_n, user_e } => vec![pid, user_n, user_e],
            Message::TokenIssueResponse { pid, user_n, user_e, sig } => {
                vec![pid, user_n, user_e, sig]
            }
            Message::RegistryMatchRequest { pids } => pids.iter().collect(),
            Message::RegistryMatchResponse { matched_pid } => {
                matched_pid.iter().collect()
            }
            Message::AlarmInsert { pid } => vec![pid],
            Message::Challenge { .. } | Message::Ack | Message::Error { .. } => vec![],
        }
    }
}

/// Serializes to one newline-terminated JSON line.
pub fn encode(env: &Envelope) -> String {
    let mut obj = Map::new();
    obj.insert("type".into(), json!(env.msg.type_tag()));
    obj.insert("session_id".into(), json!(env.session_id));
    let hex = |v: &Natural| json!(to_hex(v));
    match &env.msg {
        Message::EvalRequest { x } | Message::TransformRequest { x } => {
            obj.insert("x".into(), hex(x));
        }
        Message::EvalResponse { y } => {
            obj.insert("y".into(), hex(y));
        }
        Message::TransformResponse { t } => {
            obj.insert("t".into(), hex(t));
        }
        Message::ExchangeRequest { m } => {
            obj.insert("m".into(), hex(m));
        }
        Message::ExchangeResponse { s } => {
            obj.insert("s".into(), hex(s));
        }
        Message::Challenge { nonce } => {
            let nonce_hex: String = nonce.iter().map(|b| format!("{b:02x}")).collect();
            obj.insert("nonce".into(), json!(nonce_hex));
        }
        Message::ChallengeResponse { sig } => {
            obj.insert("sig".into(), hex(sig));
        }
        Message::TokenIssueRequest { pid, user_n, user_e } => {
            obj.insert("pid".into(), hex(pid));
            obj.insert("user_n".into(), hex(user_n));
            obj.insert("user_e".into(), hex(user_e));
        }
        Message::TokenIssueResponse { pid, user_n, user_e, sig } => {
            obj.insert("pid".into(), hex(pid));
            obj.insert("user_n".into(), hex(user_n));
            obj.insert("user_e".into(), hex(user_e));
            obj.insert("sig".into(), hex(sig));
        }
        Message::RegistryMatchRequest { pids } => {
            obj.insert("pids".into(), Value::Array(pids.iter().map(&hex).collect()));
        }
        Message::RegistryMatchResponse { matched_pid } => {
            if let Some(pid) = matched_pid {
                obj.insert("matched_pid".into(), hex(pid));
            }
        }
        Message::AlarmInsert { pid } => {
            obj.insert("pid".into(), hex(pid));
        }
        Message::Ack => {}
        Message::Error { code, detail } => {
            obj.insert("code".into(), json!(code));
            obj.insert("detail".into(), json!(detail));
        }
    }
    let mut line = Value::Object(obj).to_string();
    line.push('\n');
    line
}

struct FieldMap(Map<String, Value>);

impl FieldMap {
    fn take_string(&mut self, name: &str) -> Result<String, WireError> {
        match self.0.remove(name) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(WireError::MalformedFrame(format!("field {name} must be a string"))),
            None => Err(WireError::MalformedFrame(format!("missing field {name}"))),
        }
    }

    fn take_hex(&mut self, name: &str) -> Result<Natural, WireError> {
        let s = self.take_string(name)?;
        from_hex(&s).map_err(|_| WireError::BadHex(name.to_string()))
    }

    fn take_opt_hex(&mut self, name: &str) -> Result<Option<Natural>, WireError> {
        if !self.0.contains_key(name) {
            return Ok(None);
        }
        Ok(Some(self.take_hex(name)?))
    }

    fn take_nonce(&mut self, name: &str) -> Result<[u8; 32], WireError> {
        let s = self.take_string(name)?;
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(WireError::BadHex(name.to_string()));
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            out[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap();
        }
        Ok(out)
    }

    fn take_hex_array(&mut self, name: &str) -> Result<Vec<Natural>, WireError> {
        match self.0.remove(name) {
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => {
                        from_hex(&s).map_err(|_| WireError::BadHex(name.to_string()))
                    }
                    _ => Err(WireError::MalformedFrame(format!("{name} entries must be strings"))),
                })
                .collect(),
            Some(_) => Err(WireError::MalformedFrame(format!("field {name} must be an array"))),
            None => Err(WireError::MalformedFrame(format!("missing field {name}"))),
        }
    }

    fn finish(self) -> Result<(), WireError> {
        if let Some(key) = self.0.keys().next() {
            return Err(WireError::MalformedFrame(format!("unknown field {key:?}")));
        }
        Ok(())
    }
}

/// Parses one frame. The frame must be UTF-8, a single JSON object, and end
/// with exactly one newline.
pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| WireError::MalformedFrame("frame is not UTF-8".into()))?;
    let line = text
        .strip_suffix('\n')
        .ok_or_else(|| WireError::MalformedFrame("missing newline terminator".into()))?;
    if line.contains('\n') {
        return Err(WireError::MalformedFrame("embedded newline".into()));
    }
    let value: Value = serde_json::from_str(line)
        .map_err(|e| WireError::MalformedFrame(format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(WireError::MalformedFrame("frame is not a JSON object".into()));
    };
    let mut fields = FieldMap(map);
    let type_tag = fields.take_string("type")?;
    let session_id = fields.take_string("session_id")?;
    let msg = match type_tag.as_str() {
        "eval_request" => Message::EvalRequest { x: fields.take_hex("x")? },
        "eval_response" => Message::EvalResponse { y: fields.take_hex("y")? },
        "transform_request" => Message::TransformRequest { x: fields.take_hex("x")? },
        "transform_response" => Message::TransformResponse { t: fields.take_hex("t")? },
        "exchange_request" => Message::ExchangeRequest { m: fields.take_hex("m")? },
        "exchange_response" => Message::ExchangeResponse { s: fields.take_hex("s")? },
        "challenge" => Message::Challenge { nonce: fields.take_nonce("nonce")? },
        "challenge_response" => Message::ChallengeResponse { sig: fields.take_hex("sig")? },
        "token_issue_request" => Message::TokenIssueRequest {
            pid: fields.take_hex("pid")?,
            user_n: fields.take_hex("user_n")?,
            user_e: fields.take_hex("user_e")?,
        },
        "token_issue_response" => Message::TokenIssueResponse {
            pid: fields.take_hex("pid")?,
            user_n: fields.take_hex("user_n")?,
            user_e: fields.take_hex("user_e")?,
            sig: fields.take_hex("sig")?,
        },
        "registry_match_request" => {
            Message::RegistryMatchRequest { pids: fields.take_hex_array("pids")? }
        }
        "registry_match_response" => {
            Message::RegistryMatchResponse { matched_pid: fields.take_opt_hex("matched_pid")? }
        }
        "alarm_insert" => Message::AlarmInsert { pid: fields.take_hex("pid")? },
        "ack" => Message::Ack,
        "error" => Message::Error {
            code: fields.take_string("code")?,
            detail: fields.take_string("detail")?,
        },
        other => return Err(WireError::UnknownType(other.to_string())),
    };
    fields.finish()?;
    Ok(Envelope { session_id, msg })
}

// ---------------------------------------------------------------------------
// Error code catalogue

pub(crate) fn error_envelope(session_id: &str, code: &str) -> Envelope {
    let detail = match code {
        "malformed_frame" => "frame could not be parsed",
        "unknown_type" => "message type not in the protocol set",
        "bad_hex" => "number field is not canonical lowercase hex",
        "unexpected_message" => "message not valid in this conversation state",
        "out_of_range" => "value outside [1, N)",
        "proof_of_possession_failed" => "challenge response did not verify",
        "already_registered" => "pseudonym already registered with status ok",
        "alarm_locked" => "pseudonym is alarm-locked",
        "stale_nonce" => "challenge nonce already consumed",
        _ => "internal error",
    };
    Envelope {
        session_id: session_id.to_string(),
        msg: Message::Error { code: code.to_string(), detail: detail.to_string() },
    }
}

pub(crate) fn protocol_error_code(err: &ProtocolError) -> &'static str {
    match err {
        ProtocolError::ProofOfPossessionFailed => "proof_of_possession_failed",
        ProtocolError::StaleNonce => "stale_nonce",
        ProtocolError::RegistryConflict(RegistryError::AlreadyRegistered) => "already_registered",
        ProtocolError::RegistryConflict(RegistryError::AlarmLocked) => "alarm_locked",
        ProtocolError::Oprf(_) => "out_of_range",
        _ => "internal",
    }
}

fn code_to_protocol_error(code: &str, detail: &str) -> ProtocolError {
    match code {
        "proof_of_possession_failed" => ProtocolError::ProofOfPossessionFailed,
        "stale_nonce" => ProtocolError::StaleNonce,
        "already_registered" => {
            ProtocolError::RegistryConflict(RegistryError::AlreadyRegistered)
        }
        "alarm_locked" => ProtocolError::RegistryConflict(RegistryError::AlarmLocked),
        _ => ProtocolError::Remote { code: code.to_string(), detail: detail.to_string() },
    }
}

// ---------------------------------------------------------------------------
// Services

pub enum ServiceRole {
    Cts(Arc<Mutex<CtsNode>>),
    Idp(Arc<Mutex<IdpNode>>),
}

pub struct ServiceHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.local_addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.local_addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Binds `addr` and serves connections until the handle is dropped. Each
/// connection carries newline-framed envelopes; malformed input yields an
/// error envelope and the connection stays open.
pub fn serve(role: ServiceRole, addr: impl ToSocketAddrs) -> Result<ServiceHandle, WireError> {
    let listener = TcpListener::bind(addr).map_err(|e| WireError::BindFailure(e.to_string()))?;
    let local_addr = listener.local_addr().map_err(|e| WireError::BindFailure(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = stop.clone();
    let role = Arc::new(role);
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_accept.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let role = role.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(&role, stream);
            });
        }
    });
    Ok(ServiceHandle { local_addr, stop, join: Some(join) })
}

fn handle_connection(role: &ServiceRole, stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    // token issuance in flight on this connection, keyed by session id
    let mut pending: Vec<(String, [u8; 32])> = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let reply = match decode(line.as_bytes()) {
            Err(WireError::UnknownType(_)) => error_envelope("", "unknown_type"),
            Err(WireError::BadHex(_)) => error_envelope("", "bad_hex"),
            Err(_) => error_envelope("", "malformed_frame"),
            Ok(env) => dispatch(role, env, &mut pending),
        };
        writer.write_all(encode(&reply).as_bytes())?;
        writer.flush()?;
    }
}

fn dispatch(role: &ServiceRole, env: Envelope, pending: &mut Vec<(String, [u8; 32])>) -> Envelope {
    let sid = env.session_id.clone();
    let reply_msg = match (role, env.msg) {
        (ServiceRole::Cts(node), Message::EvalRequest { x }) => match node.lock().unwrap().eval(&x) {
            Ok(y) => Message::EvalResponse { y },
            Err(e) => return error_envelope(&sid, protocol_error_code(&e)),
        },
        (ServiceRole::Cts(node), Message::TokenIssueRequest { pid, user_n, user_e }) => {
            let Ok(user_pub) = PublicKey::new(user_n, user_e) else {
                return error_envelope(&sid, "internal");
            };
            let challenge = node.lock().unwrap().begin_token_issue(Pid(pid), user_pub);
            pending.retain(|(s, _)| s != &sid);
            pending.push((sid.clone(), challenge.nonce));
            Message::Challenge { nonce: challenge.nonce }
        }
        (ServiceRole::Cts(node), Message::ChallengeResponse { sig }) => {
            let Some(idx) = pending.iter().position(|(s, _)| s == &sid) else {
                return error_envelope(&sid, "unexpected_message");
            };
            let (_, nonce) = pending.remove(idx);
            match node.lock().unwrap().finish_token_issue(&nonce, &sig) {
                Ok(token) => Message::TokenIssueResponse {
                    pid: token.pid.value().clone(),
                    user_n: token.user_pub.modulus_n,
                    user_e: token.user_pub.public_e,
                    sig: token.signature,
                },
                Err(e) => return error_envelope(&sid, protocol_error_code(&e)),
            }
        }
        (ServiceRole::Cts(node), Message::RegistryMatchRequest { pids }) => {
            let pids: Vec<Pid> = pids.into_iter().map(Pid).collect();
            let matched = node.lock().unwrap().registry_match(&pids);
            Message::RegistryMatchResponse { matched_pid: matched.map(|p| p.0) }
        }
        (ServiceRole::Cts(node), Message::AlarmInsert { pid }) => {
            match node.lock().unwrap().alarm_insert(&Pid(pid)) {
                Ok(()) => Message::Ack,
                Err(e) => return error_envelope(&sid, protocol_error_code(&e)),
            }
        }
        (ServiceRole::Idp(node), Message::TransformRequest { x }) => {
            match node.lock().unwrap().transform(&x) {
                Ok(t) => Message::TransformResponse { t },
                Err(e) => return error_envelope(&sid, protocol_error_code(&e)),
            }
        }
        (ServiceRole::Idp(node), Message::ExchangeRequest { m }) => {
            match node.lock().unwrap().exchange(&m) {
                Ok(s) => Message::ExchangeResponse { s },
                Err(e) => return error_envelope(&sid, protocol_error_code(&e)),
            }
        }
        _ => return error_envelope(&sid, "unexpected_message"),
    };
    Envelope { session_id: sid, msg: reply_msg }
}

// ---------------------------------------------------------------------------
// Wire clients

struct WireConn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl WireConn {
    fn connect(addr: &str) -> Result<WireConn, ProtocolError> {
        let stream =
            TcpStream::connect(addr).map_err(|e| ProtocolError::Transport(e.to_string()))?;
        let reader = BufReader::new(
            stream.try_clone().map_err(|e| ProtocolError::Transport(e.to_string()))?,
        );
        Ok(WireConn { reader, writer: stream })
    }

    fn round_trip(&mut self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        self.writer
            .write_all(encode(env).as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| ProtocolError::Transport(e.to_string()))?;
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| ProtocolError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(ProtocolError::Transport("connection closed".into()));
        }
        decode(line.as_bytes()).map_err(|e| ProtocolError::Transport(e.to_string()))
    }
}

fn expect_no_error(env: Envelope) -> Result<Message, ProtocolError> {
    match env.msg {
        Message::Error { code, detail } => Err(code_to_protocol_error(&code, &detail)),
        msg => Ok(msg),
    }
}

/// [`CtsClient`] over a TCP connection to a running master service.
pub struct WireCtsClient {
    conn: WireConn,
}

impl WireCtsClient {
    pub fn connect(addr: &str) -> Result<WireCtsClient, ProtocolError> {
        Ok(WireCtsClient { conn: WireConn::connect(addr)? })
    }
}

impl CtsClient for WireCtsClient {
    fn eval(&mut self, session_id: &str, x: &Natural) -> Result<Natural, ProtocolError> {
        let env = Envelope {
            session_id: session_id.to_string(),
            msg: Message::EvalRequest { x: x.clone() },
        };
        match expect_no_error(self.conn.round_trip(&env)?)? {
            Message::EvalResponse { y } => Ok(y),
            other => Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag()))),
        }
    }

    fn token_issue(
        &mut self,
        session_id: &str,
        pid: &Pid,
        user_pub: &PublicKey,
        signer: &mut ChallengeSigner<'_>,
    ) -> Result<Token, ProtocolError> {
        let request = Envelope {
            session_id: session_id.to_string(),
            msg: Message::TokenIssueRequest {
                pid: pid.value().clone(),
                user_n: user_pub.modulus_n.clone(),
                user_e: user_pub.public_e.clone(),
            },
        };
        let nonce = match expect_no_error(self.conn.round_trip(&request)?)? {
            Message::Challenge { nonce } => nonce,
            other => {
                return Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag())))
            }
        };
        let challenge = Challenge { nonce, context: CHALLENGE_CONTEXT.to_string() };
        let sig = signer(&challenge)?;
        let response = Envelope {
            session_id: session_id.to_string(),
            msg: Message::ChallengeResponse { sig },
        };
        match expect_no_error(self.conn.round_trip(&response)?)? {
            Message::TokenIssueResponse { pid, user_n, user_e, sig } => Ok(Token {
                pid: Pid(pid),
                user_pub: PublicKey::new(user_n, user_e)?,
                signature: sig,
            }),
            other => Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag()))),
        }
    }

    fn registry_match(
        &mut self,
        session_id: &str,
        pids: &[Pid],
    ) -> Result<Option<Pid>, ProtocolError> {
        let env = Envelope {
            session_id: session_id.to_string(),
            msg: Message::RegistryMatchRequest {
                pids: pids.iter().map(|p| p.value().clone()).collect(),
            },
        };
        match expect_no_error(self.conn.round_trip(&env)?)? {
            Message::RegistryMatchResponse { matched_pid } => Ok(matched_pid.map(Pid)),
            other => Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag()))),
        }
    }

    fn alarm_insert(&mut self, session_id: &str, pid: &Pid) -> Result<(), ProtocolError> {
        let env = Envelope {
            session_id: session_id.to_string(),
            msg: Message::AlarmInsert { pid: pid.value().clone() },
        };
        match expect_no_error(self.conn.round_trip(&env)?)? {
            Message::Ack => Ok(()),
            other => Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag()))),
        }
    }
}

/// [`PeerClient`] over a TCP connection to a peer IdP service.
pub struct WirePeerClient {
    idp_id: String,
    conn: WireConn,
}

impl WirePeerClient {
    pub fn connect(idp_id: &str, addr: &str) -> Result<WirePeerClient, ProtocolError> {
        let conn = WireConn::connect(addr)
            .map_err(|_| ProtocolError::PeerUnavailable(idp_id.to_string()))?;
        Ok(WirePeerClient { idp_id: idp_id.to_string(), conn })
    }
}

impl PeerClient for WirePeerClient {
    fn idp_id(&self) -> &str {
        &self.idp_id
    }

    fn transform(&mut self, session_id: &str, x: &Natural) -> Result<Natural, ProtocolError> {
        let env = Envelope {
            session_id: session_id.to_string(),
            msg: Message::TransformRequest { x: x.clone() },
        };
        let reply = self
            .conn
            .round_trip(&env)
            .map_err(|_| ProtocolError::PeerUnavailable(self.idp_id.clone()))?;
        match expect_no_error(reply)? {
            Message::TransformResponse { t } => Ok(t),
            other => Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag()))),
        }
    }

    fn exchange(&mut self, session_id: &str, m: &Natural) -> Result<Natural, ProtocolError> {
        let env = Envelope {
            session_id: session_id.to_string(),
            msg: Message::ExchangeRequest { m: m.clone() },
        };
        let reply = self
            .conn
            .round_trip(&env)
            .map_err(|_| ProtocolError::PeerUnavailable(self.idp_id.clone()))?;
        match expect_no_error(reply)? {
            Message::ExchangeResponse { s } => Ok(s),
            other => Err(ProtocolError::Transport(format!("unexpected {}", other.type_tag()))),
        }
    }
}

/// Flat `key=value` config file shared by the services and the CLI. The
/// environment variable `FEDBLIND_CONFIG` may name the file.
pub const CONFIG_ENV_VAR: &str = "FEDBLIND_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: Vec<(String, String)>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, WireError> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| WireError::ConfigError(format!("bad config line {line:?}")))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Config { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// All `(suffix, value)` pairs for keys of the form `<prefix><suffix>`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(&str, &str)> {
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s, v.as_str())))
            .collect()
    }
}
