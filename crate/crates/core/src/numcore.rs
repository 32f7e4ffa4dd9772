//! Arbitrary-precision modular arithmetic, deterministic RSA key generation,
//! full-domain hashing into `Z_N^*`, and canonical integer encodings.
//!
//! Everything here is deterministic: all randomness flows from a [`Seed`]
//! through [`SeededRng`], a hash-counter byte generator, so key material and
//! protocol runs reproduce byte-for-byte.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

/// Arbitrary-precision non-negative integer.
pub type Natural = BigUint;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumError {
    #[error("key size must be an even number of bits >= 16")]
    InvalidBits,
    #[error("modulus must be >= 2")]
    ZeroModulus,
    #[error("value is not invertible modulo the given modulus")]
    NotInvertible,
    #[error("value does not fit in the requested byte length")]
    ValueTooLarge,
    #[error("full-domain hash could not find a unit; modulus looks malformed")]
    MalformedModulus,
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("malformed hex field: {0}")]
    BadHex(String),
    #[error("malformed key file: {0}")]
    BadKeyFile(String),
}

// ---------------------------------------------------------------------------
// Seed and deterministic byte generator

/// 32-byte seed driving every random choice in the artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed(pub [u8; 32]);

impl Seed {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Seed(bytes)
    }

    /// Expands a short label into a full seed. Test convenience.
    pub fn from_label(label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"fedblind-seed-label");
        h.update(label.as_bytes());
        Seed(h.finalize().into())
    }

    pub fn from_hex(s: &str) -> Result<Self, NumError> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(NumError::BadHex(format!("seed must be 64 hex chars, got {:?}", s)));
        }
        let mut bytes = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16).unwrap() as u8;
            let lo = (chunk[1] as char).to_digit(16).unwrap() as u8;
            bytes[i] = hi << 4 | lo;
        }
        Ok(Seed(bytes))
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic byte generator: SHA-256 over (seed, block counter).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: [u8; 32],
    counter: u64,
    buf: [u8; 32],
    pos: usize,
}

impl SeededRng {
    pub fn new(seed: Seed) -> Self {
        SeededRng { seed: seed.0, counter: 0, buf: [0; 32], pos: 32 }
    }

    /// Derives an independent child stream. Forks with distinct labels never
    /// overlap, and forking does not disturb the parent stream.
    pub fn fork(&self, label: &str) -> SeededRng {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update([0xff]);
        h.update(label.as_bytes());
        SeededRng { seed: h.finalize().into(), counter: 0, buf: [0; 32], pos: 32 }
    }

    fn refill(&mut self) {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(self.counter.to_be_bytes());
        self.buf = h.finalize().into();
        self.counter += 1;
        self.pos = 0;
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        for b in out.iter_mut() {
            if self.pos == 32 {
                self.refill();
            }
            *b = self.buf[self.pos];
            self.pos += 1;
        }
    }

    pub fn bytes(&mut self, n: usize) -> Vec<u8> {
        let mut v = vec![0u8; n];
        self.fill_bytes(&mut v);
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut b = [0u8; 8];
        self.fill_bytes(&mut b);
        u64::from_be_bytes(b)
    }

    /// Uniform value in `[0, bound)` by rejection sampling.
    pub fn natural_below(&mut self, bound: &Natural) -> Natural {
        assert!(!bound.is_zero(), "bound must be positive");
        let bits = bound.bits();
        let nbytes = bits.div_ceil(8) as usize;
        let excess = (nbytes as u64 * 8 - bits) as u32;
        loop {
            let mut raw = self.bytes(nbytes);
            if excess > 0 {
                raw[0] &= 0xffu8 >> excess;
            }
            let candidate = Natural::from_bytes_be(&raw);
            if &candidate < bound {
                return candidate;
            }
        }
    }

    /// Uniform unit of `Z_n^*` in `[2, n)`.
    pub fn unit_mod(&mut self, n: &Natural) -> Natural {
        let two = Natural::from(2u32);
        loop {
            let candidate = self.natural_below(n);
            if candidate >= two && candidate.gcd(n).is_one() {
                return candidate;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Modular arithmetic

/// `base^exponent mod modulus`.
pub fn mod_pow(base: &Natural, exponent: &Natural, modulus: &Natural) -> Result<Natural, NumError> {
    if modulus < &Natural::from(2u32) {
        return Err(NumError::ZeroModulus);
    }
    Ok(base.modpow(exponent, modulus))
}

/// Multiplicative inverse of `a` modulo `modulus`, via extended Euclid.
pub fn mod_inverse(a: &Natural, modulus: &Natural) -> Result<Natural, NumError> {
    if modulus < &Natural::from(2u32) {
        return Err(NumError::ZeroModulus);
    }
    let a = BigInt::from_biguint(Sign::Plus, a % modulus);
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let egcd = a.extended_gcd(&m);
    if !egcd.gcd.is_one() {
        return Err(NumError::NotInvertible);
    }
    let inv = egcd.x.mod_floor(&m);
    Ok(inv.to_biguint().expect("mod_floor of positive modulus is non-negative"))
}

// ---------------------------------------------------------------------------
// Canonical encodings

/// Fixed-width big-endian encoding of `value` into `length` bytes.
pub fn i2osp(value: &Natural, length: usize) -> Result<Vec<u8>, NumError> {
    let raw = value.to_bytes_be();
    let raw = if value.is_zero() { vec![] } else { raw };
    if raw.len() > length {
        return Err(NumError::ValueTooLarge);
    }
    let mut out = vec![0u8; length - raw.len()];
    out.extend_from_slice(&raw);
    Ok(out)
}

pub fn os2ip(bytes: &[u8]) -> Natural {
    Natural::from_bytes_be(bytes)
}

/// Lowercase hex without leading zeros; `"0"` for zero.
pub fn to_hex(value: &Natural) -> String {
    format!("{value:x}")
}

/// Parses the canonical hex form produced by [`to_hex`]. Rejects `0x`
/// prefixes, uppercase digits, empty strings, and leading zeros.
pub fn from_hex(s: &str) -> Result<Natural, NumError> {
    if s.is_empty() {
        return Err(NumError::BadHex("empty".into()));
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(NumError::BadHex(format!("leading zero in {s:?}")));
    }
    if !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err(NumError::BadHex(format!("non-hex character in {s:?}")));
    }
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| NumError::BadHex(s.into()))
}

// ---------------------------------------------------------------------------
// Primality and key generation

const MILLER_RABIN_ROUNDS: u32 = 40;

/// Miller-Rabin with bases drawn from `rng`.
pub fn is_probable_prime(n: &Natural, rounds: u32, rng: &mut SeededRng) -> bool {
    let two = Natural::from(2u32);
    let three = Natural::from(3u32);
    if n < &two {
        return false;
    }
    if n == &two || n == &three {
        return true;
    }
    if n.is_even() {
        return false;
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let span = n - 3u32; // bases in [2, n-2]
    'witness: for _ in 0..rounds {
        let a = &two + rng.natural_below(&span);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn gen_prime(bits: u64, rng: &mut SeededRng) -> Natural {
    assert!(bits >= 8);
    let nbytes = bits.div_ceil(8) as usize;
    let excess = (nbytes as u64 * 8 - bits) as u32;
    loop {
        let mut raw = rng.bytes(nbytes);
        raw[0] &= 0xffu8 >> excess;
        let mut candidate = Natural::from_bytes_be(&raw);
        // top two bits set so the product of two such primes has exactly
        // `2*bits` bits; low bit set for oddness
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

/// CTS master key `K = (N, e, d)` together with its factorization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsaKeyPair {
    pub p: Natural,
    pub q: Natural,
    pub modulus_n: Natural,
    pub public_e: Natural,
    pub private_d: Natural,
    pub lambda_n: Natural,
}

/// Public half of an RSA key: `(N, e)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub modulus_n: Natural,
    pub public_e: Natural,
}

impl RsaKeyPair {
    /// Deterministic key generation from a seed. `bits` is the modulus size.
    pub fn generate(bits: u64, seed: Seed) -> Result<RsaKeyPair, NumError> {
        if bits < 16 || bits % 2 != 0 {
            return Err(NumError::InvalidBits);
        }
        let mut rng = SeededRng::new(seed).fork("rsa-keygen");
        let half = bits / 2;
        let p = gen_prime(half, &mut rng);
        let q = loop {
            let q = gen_prime(half, &mut rng);
            if q != p {
                break q;
            }
        };
        let modulus_n = &p * &q;
        debug_assert_eq!(modulus_n.bits(), bits);
        let lambda_n = (&p - 1u32).lcm(&(&q - 1u32));
        let public_e = choose_public_exponent(&lambda_n);
        let private_d = mod_inverse(&public_e, &lambda_n)?;
        Ok(RsaKeyPair { p, q, modulus_n, public_e, private_d, lambda_n })
    }

    /// Validity-checked constructor for externally supplied components
    /// (toy fixtures, key files).
    pub fn from_parts(
        p: Natural,
        q: Natural,
        public_e: Natural,
        private_d: Natural,
    ) -> Result<RsaKeyPair, NumError> {
        if p == q {
            return Err(NumError::InvalidKey("p and q must differ".into()));
        }
        let mut rng = SeededRng::new(Seed::from_label("from-parts-primality"));
        for (name, prime) in [("p", &p), ("q", &q)] {
            if !is_probable_prime(prime, MILLER_RABIN_ROUNDS, &mut rng) {
                return Err(NumError::InvalidKey(format!("{name} is not prime")));
            }
        }
        let modulus_n = &p * &q;
        let lambda_n = (&p - 1u32).lcm(&(&q - 1u32));
        if !public_e.gcd(&lambda_n).is_one() {
            return Err(NumError::InvalidKey("e not coprime to lambda(n)".into()));
        }
        if !((&public_e * &private_d) % &lambda_n).is_one() {
            return Err(NumError::InvalidKey("e*d != 1 mod lambda(n)".into()));
        }
        Ok(RsaKeyPair { p, q, modulus_n, public_e, private_d, lambda_n })
    }

    pub fn public(&self) -> PublicKey {
        PublicKey { modulus_n: self.modulus_n.clone(), public_e: self.public_e.clone() }
    }

    /// Byte length of the modulus; the fixed width for pid encodings.
    pub fn modulus_len(&self) -> usize {
        self.modulus_n.bits().div_ceil(8) as usize
    }

    /// Flat text record, one `name=hex` line per field.
    pub fn to_key_file(&self) -> String {
        format!(
            "p={}\nq={}\nn={}\ne={}\nd={}\nlambda={}\n",
            to_hex(&self.p),
            to_hex(&self.q),
            to_hex(&self.modulus_n),
            to_hex(&self.public_e),
            to_hex(&self.private_d),
            to_hex(&self.lambda_n),
        )
    }

    pub fn from_key_file(text: &str) -> Result<RsaKeyPair, NumError> {
        let fields = parse_key_fields(text, &["p", "q", "n", "e", "d", "lambda"])?;
        let key = RsaKeyPair::from_parts(
            fields[0].clone(),
            fields[1].clone(),
            fields[3].clone(),
            fields[4].clone(),
        )?;
        if key.modulus_n != fields[2] {
            return Err(NumError::BadKeyFile("n does not equal p*q".into()));
        }
        if key.lambda_n != fields[5] {
            return Err(NumError::BadKeyFile("lambda does not equal lcm(p-1,q-1)".into()));
        }
        Ok(key)
    }
}

impl PublicKey {
    pub fn new(modulus_n: Natural, public_e: Natural) -> Result<PublicKey, NumError> {
        if modulus_n < Natural::from(4u32) {
            return Err(NumError::InvalidKey("modulus must be >= 4".into()));
        }
        if public_e < Natural::from(3u32) || public_e.is_even() {
            return Err(NumError::InvalidKey("public exponent must be odd and >= 3".into()));
        }
        Ok(PublicKey { modulus_n, public_e })
    }

    pub fn modulus_len(&self) -> usize {
        self.modulus_n.bits().div_ceil(8) as usize
    }

    pub fn to_key_file(&self) -> String {
        format!("n={}\ne={}\n", to_hex(&self.modulus_n), to_hex(&self.public_e))
    }

    pub fn from_key_file(text: &str) -> Result<PublicKey, NumError> {
        let fields = parse_key_fields(text, &["n", "e"])?;
        PublicKey::new(fields[0].clone(), fields[1].clone())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(n={}, e={})", to_hex(&self.modulus_n), to_hex(&self.public_e))
    }
}

fn parse_key_fields(text: &str, names: &[&str]) -> Result<Vec<Natural>, NumError> {
    let mut lines = text.lines();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let line = lines
            .next()
            .ok_or_else(|| NumError::BadKeyFile(format!("missing field {name}")))?;
        let value = line
            .strip_prefix(&format!("{name}="))
            .ok_or_else(|| NumError::BadKeyFile(format!("expected `{name}=`, got {line:?}")))?;
        out.push(from_hex(value)?);
    }
    if lines.next().is_some_and(|l| !l.trim().is_empty()) {
        return Err(NumError::BadKeyFile("trailing content".into()));
    }
    Ok(out)
}

fn choose_public_exponent(lambda: &Natural) -> Natural {
    let f4 = Natural::from(65537u32);
    if lambda > &f4 && f4.gcd(lambda).is_one() {
        return f4;
    }
    let mut e = Natural::from(3u32);
    while !e.gcd(lambda).is_one() {
        e += 2u32;
    }
    e
}

// ---------------------------------------------------------------------------
// Full-domain hash

const FDH_MAX_OUTER: u32 = 1000;

/// Hashes `input` into the unit group of `Z_N`: counter-mode SHA-256
/// expansion to the byte length of N, reduced mod N, retried with an
/// incremented outer counter until the result lands in `[2, N)` coprime to N.
pub fn fdh_hash(input: &[u8], key: &PublicKey) -> Result<Natural, NumError> {
    let n = &key.modulus_n;
    let nbytes = key.modulus_len();
    let two = Natural::from(2u32);
    for outer in 0..FDH_MAX_OUTER {
        let mut stream = Vec::with_capacity(nbytes);
        let mut inner: u32 = 0;
        while stream.len() < nbytes {
            let mut h = Sha256::new();
            h.update(b"fedblind-fdh-v1");
            h.update(outer.to_be_bytes());
            h.update(inner.to_be_bytes());
            h.update(input);
            stream.extend_from_slice(&h.finalize());
            inner += 1;
        }
        stream.truncate(nbytes);
        let candidate = os2ip(&stream) % n;
        if candidate >= two && candidate.gcd(n).is_one() {
            return Ok(candidate);
        }
    }
    Err(NumError::MalformedModulus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nat(v: u64) -> Natural {
        Natural::from(v)
    }

    // independent square-and-multiply oracle, kept separate from modpow
    fn mod_pow_oracle(base: u64, exp: u64, modulus: u64) -> u64 {
        let mut acc: u128 = 1;
        for _ in 0..exp {
            acc = acc * base as u128 % modulus as u128;
        }
        acc as u64
    }

    // brute-force inverse oracle
    fn mod_inverse_oracle(a: u64, m: u64) -> Option<u64> {
        (1..m).find(|b| a as u128 * *b as u128 % m as u128 == 1)
    }

    #[test]
    fn mod_pow_matches_oracle() {
        assert_eq!(mod_pow_oracle(31, 5, 35), 26);
        assert_eq!(mod_pow(&nat(31), &nat(5), &nat(35)).unwrap(), nat(26));
        assert_eq!(mod_pow_oracle(2, 5, 35), 32);
        assert_eq!(mod_pow(&nat(2), &nat(5), &nat(35)).unwrap(), nat(32));
    }

    #[test]
    fn mod_pow_zero_exponent() {
        for x in [0u64, 1, 7, 34, 99] {
            assert_eq!(mod_pow(&nat(x), &nat(0), &nat(35)).unwrap(), nat(1));
        }
    }

    #[test]
    fn mod_pow_rejects_small_modulus() {
        assert_eq!(mod_pow(&nat(3), &nat(4), &nat(1)), Err(NumError::ZeroModulus));
        assert_eq!(mod_pow(&nat(3), &nat(4), &nat(0)), Err(NumError::ZeroModulus));
    }

    #[test]
    fn mod_inverse_matches_oracle() {
        assert_eq!(mod_inverse_oracle(3, 35), Some(12));
        assert_eq!(mod_inverse(&nat(3), &nat(35)).unwrap(), nat(12));
        assert_eq!(mod_inverse_oracle(17, 35), Some(33));
        assert_eq!(mod_inverse(&nat(17), &nat(35)).unwrap(), nat(33));
        for m in [2u64, 5, 12, 35, 97] {
            assert_eq!(mod_inverse(&nat(1), &nat(m)).unwrap(), nat(1));
        }
    }

    #[test]
    fn mod_inverse_rejects_non_units() {
        assert_eq!(mod_inverse(&nat(5), &nat(35)), Err(NumError::NotInvertible));
        assert_eq!(mod_inverse(&nat(0), &nat(7)), Err(NumError::NotInvertible));
    }

    #[test]
    fn keygen_is_deterministic() {
        let seed = Seed::from_label("keygen-det");
        let a = RsaKeyPair::generate(64, seed).unwrap();
        let b = RsaKeyPair::generate(64, seed).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.modulus_n.bits(), 64);
    }

    #[test]
    fn keygen_small_modulus_has_requested_bits() {
        let key = RsaKeyPair::generate(16, Seed::from_label("tiny")).unwrap();
        assert_eq!(key.modulus_n.bits(), 16);
        assert!(((&key.public_e * &key.private_d) % &key.lambda_n).is_one());
    }

    #[test]
    fn keygen_rejects_bad_bits() {
        assert_eq!(RsaKeyPair::generate(15, Seed::from_label("x")).unwrap_err(), NumError::InvalidBits);
        assert_eq!(RsaKeyPair::generate(17, Seed::from_label("x")).unwrap_err(), NumError::InvalidBits);
        assert_eq!(RsaKeyPair::generate(0, Seed::from_label("x")).unwrap_err(), NumError::InvalidBits);
    }

    #[test]
    fn toy_fixture_accepted() {
        // extended-Euclid oracle: 5*5 = 25 = 2*12 + 1
        assert_eq!(mod_inverse_oracle(5, 12), Some(5));
        let key = RsaKeyPair::from_parts(nat(5), nat(7), nat(5), nat(5)).unwrap();
        assert_eq!(key.modulus_n, nat(35));
        assert_eq!(key.lambda_n, nat(12));
    }

    #[test]
    fn from_parts_rejects_bad_material() {
        assert!(RsaKeyPair::from_parts(nat(5), nat(5), nat(5), nat(5)).is_err());
        assert!(RsaKeyPair::from_parts(nat(6), nat(7), nat(5), nat(5)).is_err());
        assert!(RsaKeyPair::from_parts(nat(5), nat(7), nat(5), nat(7)).is_err());
        assert!(RsaKeyPair::from_parts(nat(5), nat(7), nat(4), nat(4)).is_err());
    }

    #[test]
    fn rsa_round_trip_on_units() {
        let key = RsaKeyPair::generate(32, Seed::from_label("round-trip")).unwrap();
        let mut rng = SeededRng::new(Seed::from_label("round-trip-samples"));
        for _ in 0..50 {
            let x = rng.unit_mod(&key.modulus_n);
            let c = mod_pow(&x, &key.public_e, &key.modulus_n).unwrap();
            let back = mod_pow(&c, &key.private_d, &key.modulus_n).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn fdh_is_deterministic_and_lands_in_unit_group() {
        let key = PublicKey::new(nat(35), nat(5)).unwrap();
        let h1 = fdh_hash(b"upi-0001", &key).unwrap();
        let h2 = fdh_hash(b"upi-0001", &key).unwrap();
        assert_eq!(h1, h2);
        // enumerate the 24 units of Z_35
        let units: Vec<u64> = (1..35).filter(|x| num_integer::gcd(*x, 35u64) == 1).collect();
        assert_eq!(units.len(), 24);
        for input in [&b"a"[..], b"b", b"upi", b"\x00\x01"] {
            let h = fdh_hash(input, &key).unwrap();
            let hv: u64 = h.try_into().unwrap();
            assert!(units.contains(&hv), "{hv} not a unit of Z_35");
            assert!(hv >= 2);
        }
    }

    #[test]
    fn fdh_on_realistic_modulus() {
        let key = RsaKeyPair::generate(64, Seed::from_label("fdh64")).unwrap();
        let h = fdh_hash(b"user", &key.public()).unwrap();
        assert!(h >= nat(2) && h < key.modulus_n);
        assert!(h.gcd(&key.modulus_n).is_one());
    }

    #[test]
    fn i2osp_basics() {
        assert_eq!(i2osp(&nat(0), 4).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(i2osp(&nat(18), 1).unwrap(), vec![0x12]);
        assert_eq!(i2osp(&nat(256), 1), Err(NumError::ValueTooLarge));
    }

    #[test]
    fn hex_grammar() {
        assert_eq!(to_hex(&nat(0)), "0");
        assert_eq!(to_hex(&nat(26)), "1a");
        assert_eq!(from_hex("1a").unwrap(), nat(26));
        assert_eq!(from_hex("0").unwrap(), nat(0));
        assert!(from_hex("").is_err());
        assert!(from_hex("01a").is_err());
        assert!(from_hex("0x1f").is_err());
        assert!(from_hex("1F").is_err());
    }

    #[test]
    fn key_file_round_trip() {
        let key = RsaKeyPair::generate(64, Seed::from_label("keyfile")).unwrap();
        let text = key.to_key_file();
        let back = RsaKeyPair::from_key_file(&text).unwrap();
        assert_eq!(key, back);
        let pubtext = key.public().to_key_file();
        assert_eq!(PublicKey::from_key_file(&pubtext).unwrap(), key.public());
        assert!(RsaKeyPair::from_key_file("p=5\n").is_err());
    }

    #[test]
    fn seeded_rng_streams_are_reproducible_and_fork_independent() {
        let mut a = SeededRng::new(Seed::from_label("rng"));
        let mut b = SeededRng::new(Seed::from_label("rng"));
        assert_eq!(a.bytes(100), b.bytes(100));
        let mut fork = a.fork("child");
        let mut d = SeededRng::new(Seed::from_label("rng"));
        d.bytes(100);
        assert_ne!(d.bytes(32), fork.bytes(32));
        // fork does not perturb the parent
        let mut c = SeededRng::new(Seed::from_label("rng"));
        c.bytes(100);
        c.fork("other");
        assert_eq!(a.bytes(16), c.bytes(16));
    }
}
