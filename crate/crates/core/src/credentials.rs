//! User key pairs, master-signed tokens binding `(PID, pk_u)`, and the
//! challenge-response proof of private-key possession.
//!
//! Tokens are full-domain-hash RSA signatures under the master key over a
//! canonical serialization of the pseudonym and the user's public key. Users
//! sign with their own independent RSA modulus. The Chaum blinding flow
//! (blind, sign, unblind over an arbitrary message) is also provided as a
//! standalone primitive.

use crate::numcore::{fdh_hash, i2osp, mod_pow, Natural, NumError, PublicKey, RsaKeyPair, Seed, SeededRng};
use crate::oprfcore::{BlindingFactor, Pid};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use thiserror::Error;

/// Domain separation tag for token messages.
pub const TOKEN_CONTEXT: &str = "fedblind-token-v1";
/// Domain separation tag for challenge-response.
pub const CHALLENGE_CONTEXT: &str = "fedblind-cr-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CredError {
    #[error("challenge nonce was already consumed")]
    StaleNonce,
    #[error("challenge context mismatch")]
    ContextMismatch,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// A user's RSA-FDH signing key; the modulus is independent of the master
/// modulus N.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserKeyPair(pub RsaKeyPair);

impl UserKeyPair {
    pub fn generate(bits: u64, seed: Seed) -> Result<UserKeyPair, NumError> {
        Ok(UserKeyPair(RsaKeyPair::generate(bits, seed)?))
    }

    pub fn public(&self) -> PublicKey {
        self.0.public()
    }

    /// FDH signature over an arbitrary message under the user's key.
    pub fn sign(&self, message: &[u8]) -> Result<Natural, NumError> {
        let h = fdh_hash(message, &self.0.public())?;
        mod_pow(&h, &self.0.private_d, &self.0.modulus_n)
    }
}

/// FDH signature verification under an arbitrary public key.
pub fn verify_fdh(message: &[u8], signature: &Natural, key: &PublicKey) -> bool {
    let Ok(h) = fdh_hash(message, key) else { return false };
    match mod_pow(signature, &key.public_e, &key.modulus_n) {
        Ok(v) => v == h,
        Err(_) => false,
    }
}

/// Master-signed token binding a pseudonym to a user public key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub pid: Pid,
    pub user_pub: PublicKey,
    pub signature: Natural,
}

impl Token {
    /// Wire/file form: `{pid, user_n, user_e, sig}` as lowercase hex.
    pub fn to_file(&self) -> String {
        format!(
            "pid={}\nuser_n={}\nuser_e={}\nsig={}\n",
            crate::numcore::to_hex(self.pid.value()),
            crate::numcore::to_hex(&self.user_pub.modulus_n),
            crate::numcore::to_hex(&self.user_pub.public_e),
            crate::numcore::to_hex(&self.signature),
        )
    }

    pub fn from_file(text: &str) -> Result<Token, NumError> {
        let mut fields = Vec::new();
        for (line, name) in text.lines().zip(["pid", "user_n", "user_e", "sig"]) {
            let value = line
                .strip_prefix(&format!("{name}="))
                .ok_or_else(|| NumError::BadKeyFile(format!("expected `{name}=`")))?;
            fields.push(crate::numcore::from_hex(value)?);
        }
        if fields.len() != 4 {
            return Err(NumError::BadKeyFile("token file needs 4 fields".into()));
        }
        Ok(Token {
            pid: Pid(fields[0].clone()),
            user_pub: PublicKey::new(fields[1].clone(), fields[2].clone())?,
            signature: fields[3].clone(),
        })
    }
}

/// Canonical byte serialization of `(pid, pk_u)` for signing: context tag,
/// fixed-width pid at the master modulus length, then the user's modulus and
/// exponent each with a 4-byte length prefix.
pub fn token_message(pid: &Pid, user_pub: &PublicKey, cts_pub: &PublicKey) -> Result<Vec<u8>, NumError> {
    let mut out = Vec::new();
    out.extend_from_slice(TOKEN_CONTEXT.as_bytes());
    out.extend_from_slice(&i2osp(pid.value(), cts_pub.modulus_len())?);
    for field in [&user_pub.modulus_n, &user_pub.public_e] {
        let bytes = field.to_bytes_be();
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// Signs `(pid, pk_u)` under the master key. The caller must already have
/// verified proof of possession for `pk_u`.
pub fn issue_token(pid: &Pid, user_pub: &PublicKey, cts_key: &RsaKeyPair) -> Result<Token, NumError> {
    let cts_pub = cts_key.public();
    let msg = token_message(pid, user_pub, &cts_pub)?;
    let h = fdh_hash(&msg, &cts_pub)?;
    let signature = mod_pow(&h, &cts_key.private_d, &cts_key.modulus_n)?;
    Ok(Token { pid: pid.clone(), user_pub: user_pub.clone(), signature })
}

pub fn verify_token(token: &Token, cts_pub: &PublicKey) -> bool {
    let Ok(msg) = token_message(&token.pid, &token.user_pub, cts_pub) else { return false };
    let Ok(h) = fdh_hash(&msg, cts_pub) else { return false };
    match mod_pow(&token.signature, &cts_pub.public_e, &cts_pub.modulus_n) {
        Ok(v) => v == h,
        Err(_) => false,
    }
}

// ---------------------------------------------------------------------------
// Challenge-response proof of possession

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub nonce: [u8; 32],
    pub context: String,
}

pub fn make_challenge(rng: &mut SeededRng) -> Challenge {
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    Challenge { nonce, context: CHALLENGE_CONTEXT.to_string() }
}

fn challenge_message(challenge: &Challenge, user_pub: &PublicKey) -> Vec<u8> {
    let mut pk_digest = Sha256::new();
    for field in [&user_pub.modulus_n, &user_pub.public_e] {
        let bytes = field.to_bytes_be();
        pk_digest.update((bytes.len() as u32).to_be_bytes());
        pk_digest.update(&bytes);
    }
    let mut out = Vec::new();
    out.extend_from_slice(challenge.context.as_bytes());
    out.extend_from_slice(&challenge.nonce);
    out.extend_from_slice(&pk_digest.finalize());
    out
}

/// User side: signs the challenge, binding in a digest of the user's own
/// public key to block cross-user replay.
pub fn respond(challenge: &Challenge, user_key: &UserKeyPair) -> Result<Natural, CredError> {
    if challenge.context != CHALLENGE_CONTEXT {
        return Err(CredError::ContextMismatch);
    }
    Ok(user_key.sign(&challenge_message(challenge, &user_key.public()))?)
}

pub fn verify_response(challenge: &Challenge, response: &Natural, user_pub: &PublicKey) -> bool {
    verify_fdh(&challenge_message(challenge, user_pub), response, user_pub)
}

/// Tracks consumed nonces for one verifier instance.
#[derive(Debug, Default)]
pub struct NonceLedger {
    consumed: HashSet<[u8; 32]>,
}

impl NonceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks a nonce consumed; a second consumption is a replay.
    pub fn consume(&mut self, nonce: &[u8; 32]) -> Result<(), CredError> {
        if !self.consumed.insert(*nonce) {
            return Err(CredError::StaleNonce);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Chaum blind signature over an arbitrary message

/// Requester step: `H(msg) * r^e mod N`.
pub fn chaum_blind(message: &[u8], r: &BlindingFactor, signer_pub: &PublicKey) -> Result<Natural, NumError> {
    let h = fdh_hash(message, signer_pub)?;
    let r_e = mod_pow(r.value(), &signer_pub.public_e, &signer_pub.modulus_n)?;
    Ok(h * r_e % &signer_pub.modulus_n)
}

/// Signer step: raises the blinded value to the private exponent without
/// seeing the message.
pub fn chaum_sign_blinded(blinded: &Natural, signer_key: &RsaKeyPair) -> Result<Natural, NumError> {
    mod_pow(blinded, &signer_key.private_d, &signer_key.modulus_n)
}

/// Requester step: strips the blinding, leaving `H(msg)^d mod N`.
pub fn chaum_unblind(blind_sig: &Natural, r: &BlindingFactor, signer_pub: &PublicKey) -> Natural {
    blind_sig * r.inverse() % &signer_pub.modulus_n
}

pub fn chaum_verify(message: &[u8], signature: &Natural, signer_pub: &PublicKey) -> bool {
    verify_fdh(message, signature, signer_pub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::to_hex;

    fn nat(v: u64) -> Natural {
        Natural::from(v)
    }

    fn toy_cts() -> RsaKeyPair {
        RsaKeyPair::from_parts(nat(5), nat(7), nat(5), nat(5)).unwrap()
    }

    fn user(label: &str) -> UserKeyPair {
        UserKeyPair::generate(48, Seed::from_label(label)).unwrap()
    }

    #[test]
    fn token_message_layout() {
        let cts = toy_cts().public();
        let u = user("layout").public();
        let pid = Pid(nat(18));
        let msg = token_message(&pid, &u, &cts).unwrap();
        let n_len = u.modulus_n.to_bytes_be().len();
        let e_len = u.public_e.to_bytes_be().len();
        assert_eq!(msg.len(), TOKEN_CONTEXT.len() + cts.modulus_len() + 8 + n_len + e_len);
        assert_eq!(msg, token_message(&pid, &u, &cts).unwrap());
        // fixed-width pid field keeps distinct pids distinct
        assert_ne!(msg, token_message(&Pid(nat(19)), &u, &cts).unwrap());
    }

    #[test]
    fn token_sign_verify_round_trip() {
        let cts = RsaKeyPair::generate(48, Seed::from_label("cts-tok")).unwrap();
        let mut rng = SeededRng::new(Seed::from_label("tok-samples"));
        for i in 0..50 {
            let u = user(&format!("u{i}"));
            let pid = Pid(rng.unit_mod(&cts.modulus_n));
            let token = issue_token(&pid, &u.public(), &cts).unwrap();
            assert!(verify_token(&token, &cts.public()));
            // tamper with the pid
            let mut bad = token.clone();
            bad.pid = Pid(bad.pid.value() ^ nat(1));
            assert!(!verify_token(&bad, &cts.public()));
        }
    }

    #[test]
    fn token_toy_fixture() {
        let cts = toy_cts();
        let u = user("toy-token");
        let pid = Pid(nat(18));
        let token = issue_token(&pid, &u.public(), &cts).unwrap();
        let msg = token_message(&pid, &u.public(), &cts.public()).unwrap();
        let h = fdh_hash(&msg, &cts.public()).unwrap();
        assert_eq!(token.signature, mod_pow(&h, &nat(5), &nat(35)).unwrap());
        assert_eq!(mod_pow(&token.signature, &nat(5), &nat(35)).unwrap(), h);
        assert!(verify_token(&token, &cts.public()));
    }

    #[test]
    fn token_rejects_tampered_signature() {
        let cts = RsaKeyPair::generate(48, Seed::from_label("cts-tamper")).unwrap();
        let u = user("tamper");
        let token = issue_token(&Pid(nat(9)), &u.public(), &cts).unwrap();
        let mut bad = token.clone();
        bad.signature = (&bad.signature + 1u32) % &cts.modulus_n;
        assert!(!verify_token(&bad, &cts.public()));
    }

    #[test]
    fn token_rejects_wrong_cts_key() {
        let cts_a = RsaKeyPair::generate(48, Seed::from_label("cts-a")).unwrap();
        let cts_b = RsaKeyPair::generate(48, Seed::from_label("cts-b")).unwrap();
        let u = user("cross");
        let token = issue_token(&Pid(nat(11)), &u.public(), &cts_a).unwrap();
        assert!(verify_token(&token, &cts_a.public()));
        assert!(!verify_token(&token, &cts_b.public()));
    }

    #[test]
    fn token_file_round_trip() {
        let cts = toy_cts();
        let u = user("tok-file");
        let token = issue_token(&Pid(nat(18)), &u.public(), &cts).unwrap();
        let text = token.to_file();
        assert!(text.starts_with(&format!("pid={}\n", to_hex(token.pid.value()))));
        assert_eq!(Token::from_file(&text).unwrap(), token);
    }

    #[test]
    fn challenge_response_honest_flow() {
        let mut rng = SeededRng::new(Seed::from_label("cr"));
        let u = user("cr-user");
        let ch = make_challenge(&mut rng);
        let resp = respond(&ch, &u).unwrap();
        assert!(verify_response(&ch, &resp, &u.public()));
    }

    #[test]
    fn challenge_response_wrong_key_rejected() {
        let mut rng = SeededRng::new(Seed::from_label("cr2"));
        let honest = user("cr-honest");
        let thief = user("cr-thief");
        let ch = make_challenge(&mut rng);
        let resp = respond(&ch, &thief).unwrap();
        assert!(!verify_response(&ch, &resp, &honest.public()));
    }

    #[test]
    fn challenge_context_enforced() {
        let u = user("cr-ctx");
        let ch = Challenge { nonce: [7; 32], context: "other-context".into() };
        assert_eq!(respond(&ch, &u).unwrap_err(), CredError::ContextMismatch);
    }

    #[test]
    fn nonce_replay_detected() {
        let mut ledger = NonceLedger::new();
        let nonce = [3u8; 32];
        ledger.consume(&nonce).unwrap();
        assert_eq!(ledger.consume(&nonce).unwrap_err(), CredError::StaleNonce);
        ledger.consume(&[4u8; 32]).unwrap();
    }

    #[test]
    fn chaum_blind_signature_round_trip() {
        let signer = RsaKeyPair::generate(48, Seed::from_label("chaum")).unwrap();
        let mut rng = SeededRng::new(Seed::from_label("chaum-r"));
        let msg = b"arbitrary message never shown to the signer";
        let r = BlindingFactor::random(&mut rng, &signer.public());
        let blinded = chaum_blind(msg, &r, &signer.public()).unwrap();
        // the signer sees only the blinded value
        assert_ne!(&blinded, &fdh_hash(msg, &signer.public()).unwrap());
        let blind_sig = chaum_sign_blinded(&blinded, &signer).unwrap();
        let sig = chaum_unblind(&blind_sig, &r, &signer.public());
        assert!(chaum_verify(msg, &sig, &signer.public()));
        assert!(!chaum_verify(b"different message", &sig, &signer.public()));
    }
}
