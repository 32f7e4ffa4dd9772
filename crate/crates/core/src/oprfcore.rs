//! The RSA-OPRF engine: blinding, evaluation under the master key, domain
//! transformation, unblinding, pseudonym derivation, and the exponent
//! exchange used by the cooperative global check.
//!
//! All arithmetic runs modulo the single master modulus N. Each identity
//! provider holds a private domain exponent `t_i` with a published inverse
//! `e_i` modulo lambda(N); the pseudonym for domain `i` is
//! `H(UPI)^(d*t_i) mod N`.

use crate::numcore::{self, i2osp, mod_inverse, mod_pow, Natural, NumError, PublicKey, RsaKeyPair, SeededRng};
use num_integer::Integer;
use num_traits::One;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OprfError {
    #[error("input must be a unit of Z_N in [2, N)")]
    InputNotUnit,
    #[error("value out of range [1, N)")]
    OutOfRange,
    #[error("value is not invertible modulo N")]
    NotInvertible,
}

/// Session blinding factor `r`, a unit of `Z_N^*`, with its inverse cached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindingFactor {
    r: Natural,
    r_inverse: Natural,
}

impl BlindingFactor {
    pub fn new(r: Natural, cts_pub: &PublicKey) -> Result<Self, OprfError> {
        let n = &cts_pub.modulus_n;
        if r < Natural::from(2u32) || &r >= n || !r.gcd(n).is_one() {
            return Err(OprfError::InputNotUnit);
        }
        let r_inverse = mod_inverse(&r, n).map_err(|_| OprfError::NotInvertible)?;
        Ok(BlindingFactor { r, r_inverse })
    }

    pub fn random(rng: &mut SeededRng, cts_pub: &PublicKey) -> Self {
        let r = rng.unit_mod(&cts_pub.modulus_n);
        BlindingFactor::new(r, cts_pub).expect("unit_mod yields a valid blinding factor")
    }

    pub fn value(&self) -> &Natural {
        &self.r
    }

    pub fn inverse(&self) -> &Natural {
        &self.r_inverse
    }
}

/// A blinded group element as submitted for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindedInput(pub Natural);

impl BlindedInput {
    pub fn value(&self) -> &Natural {
        &self.0
    }
}

/// An identity provider's domain exponent pair: `t_private` held by the IdP,
/// `e_public` published in the federation directory, inverse to each other
/// modulo lambda(N) of the master key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCredential {
    pub idp_id: String,
    pub t_private: Natural,
    pub e_public: Natural,
}

impl DomainCredential {
    /// Issued by the master-key holder: samples `t` coprime to lambda(N) and
    /// publishes its inverse.
    pub fn issue(idp_id: &str, cts_key: &RsaKeyPair, rng: &mut SeededRng) -> DomainCredential {
        let lambda = &cts_key.lambda_n;
        loop {
            let t = rng.unit_mod(lambda);
            let e = match mod_inverse(&t, lambda) {
                Ok(e) => e,
                Err(_) => continue,
            };
            if e < Natural::from(3u32) || t < Natural::from(2u32) {
                continue;
            }
            return DomainCredential { idp_id: idp_id.to_string(), t_private: t, e_public: e };
        }
    }

    /// Key-file form: `id=<string>`, `t=hex`, `e=hex`.
    pub fn to_file(&self) -> String {
        format!(
            "id={}\nt={}\ne={}\n",
            self.idp_id,
            numcore::to_hex(&self.t_private),
            numcore::to_hex(&self.e_public)
        )
    }

    pub fn from_file(text: &str) -> Result<DomainCredential, NumError> {
        let mut lines = text.lines();
        let id = lines
            .next()
            .and_then(|l| l.strip_prefix("id="))
            .ok_or_else(|| NumError::BadKeyFile("missing id".into()))?;
        let t = lines
            .next()
            .and_then(|l| l.strip_prefix("t="))
            .ok_or_else(|| NumError::BadKeyFile("missing t".into()))?;
        let e = lines
            .next()
            .and_then(|l| l.strip_prefix("e="))
            .ok_or_else(|| NumError::BadKeyFile("missing e".into()))?;
        Ok(DomainCredential {
            idp_id: id.to_string(),
            t_private: numcore::from_hex(t)?,
            e_public: numcore::from_hex(e)?,
        })
    }
}

/// Domain-specific pseudonymous identifier, an element of `Z_N`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pid(pub Natural);

impl Pid {
    pub fn value(&self) -> &Natural {
        &self.0
    }

    /// Canonical registry encoding: fixed width at the byte length of N.
    pub fn encode(&self, modulus_len: usize) -> Result<Vec<u8>, NumError> {
        i2osp(&self.0, modulus_len)
    }
}

/// One-shot blinder `k` for the exponent exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeBlinder {
    k: Natural,
    k_inverse: Natural,
}

impl ExchangeBlinder {
    pub fn new(k: Natural, cts_pub: &PublicKey) -> Result<Self, OprfError> {
        let n = &cts_pub.modulus_n;
        if k < Natural::from(2u32) || &k >= n || !k.gcd(n).is_one() {
            return Err(OprfError::InputNotUnit);
        }
        let k_inverse = mod_inverse(&k, n).map_err(|_| OprfError::NotInvertible)?;
        Ok(ExchangeBlinder { k, k_inverse })
    }

    pub fn random(rng: &mut SeededRng, cts_pub: &PublicKey) -> Self {
        let k = rng.unit_mod(&cts_pub.modulus_n);
        ExchangeBlinder::new(k, cts_pub).expect("unit_mod yields a valid exchange blinder")
    }

    pub fn value(&self) -> &Natural {
        &self.k
    }
}

/// `X = x * r^e mod N`.
pub fn blind(x: &Natural, r: &BlindingFactor, cts_pub: &PublicKey) -> Result<BlindedInput, OprfError> {
    let n = &cts_pub.modulus_n;
    if x < &Natural::one() || x >= n || !x.gcd(n).is_one() {
        return Err(OprfError::InputNotUnit);
    }
    let r_e = mod_pow(r.value(), &cts_pub.public_e, n).expect("modulus >= 2");
    Ok(BlindedInput((x * r_e) % n))
}

/// OPRF evaluation under the master key: `Y = X^d mod N`.
pub fn eval(x_blinded: &BlindedInput, cts_key: &RsaKeyPair) -> Result<Natural, OprfError> {
    let n = &cts_key.modulus_n;
    let x = x_blinded.value();
    if x < &Natural::one() || x >= n {
        return Err(OprfError::OutOfRange);
    }
    Ok(mod_pow(x, &cts_key.private_d, n).expect("modulus >= 2"))
}

/// Plain unblinding: `Y * r^-1 mod N`, yielding `x^d mod N`.
pub fn unblind(y: &Natural, r: &BlindingFactor, cts_pub: &PublicKey) -> Result<Natural, OprfError> {
    let n = &cts_pub.modulus_n;
    if y < &Natural::one() || y >= n {
        return Err(OprfError::OutOfRange);
    }
    Ok((y * r.inverse()) % n)
}

/// Domain transformation: `X^t mod N`.
pub fn domain_transform(
    x_blinded: &BlindedInput,
    cred: &DomainCredential,
    cts_pub: &PublicKey,
) -> BlindedInput {
    let n = &cts_pub.modulus_n;
    BlindedInput(mod_pow(x_blinded.value(), &cred.t_private, n).expect("modulus >= 2"))
}

/// Domain unblinding: `y * (r^t)^-1 mod N`, where `r^t` is either computed
/// locally (own domain) or obtained through the exponent exchange.
pub fn unblind_domain(
    y: &Natural,
    cred_t_power_of_r: &Natural,
    cts_pub: &PublicKey,
) -> Result<Pid, OprfError> {
    let n = &cts_pub.modulus_n;
    let inv = mod_inverse(cred_t_power_of_r, n).map_err(|_| OprfError::NotInvertible)?;
    Ok(Pid((y * inv) % n))
}

/// Exchange step 1: `m = k^e_j * r mod N`.
pub fn exchange_blind(
    r: &BlindingFactor,
    k: &ExchangeBlinder,
    peer_e: &Natural,
    cts_pub: &PublicKey,
) -> Natural {
    let n = &cts_pub.modulus_n;
    let k_e = mod_pow(k.value(), peer_e, n).expect("modulus >= 2");
    (k_e * r.value()) % n
}

/// Exchange step 3, run by the peer: `s = m^t_j mod N = k * r^t_j mod N`.
pub fn exchange_apply(
    m: &Natural,
    cred: &DomainCredential,
    cts_pub: &PublicKey,
) -> Result<Natural, OprfError> {
    let n = &cts_pub.modulus_n;
    if m < &Natural::one() || m >= n {
        return Err(OprfError::OutOfRange);
    }
    Ok(mod_pow(m, &cred.t_private, n).expect("modulus >= 2"))
}

/// Exchange step 4: `r^t_j = s * k^-1 mod N`.
pub fn exchange_recover(s: &Natural, k: &ExchangeBlinder, cts_pub: &PublicKey) -> Natural {
    let n = &cts_pub.modulus_n;
    (s * &k.k_inverse) % n
}
