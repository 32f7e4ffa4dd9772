//! Privacy-preserving federated identity enrollment.
//!
//! Building blocks for a federation where identity providers detect duplicate
//! enrollments without sharing user data: an RSA-OPRF for deriving
//! domain-specific pseudonyms, blind-signed non-transferable tokens, a
//! pseudonymous append-only registry, role state machines for the enrollment
//! protocol, a newline-framed wire protocol for running the roles as
//! services, and a deterministic federation simulator with adversary
//! scenarios and transcript leakage audits.

pub mod credentials;
pub mod harness;
pub mod numcore;
pub mod oprfcore;
pub mod protocol;
pub mod registry;
pub mod wire;

pub use numcore::{Natural, PublicKey, RsaKeyPair, Seed, SeededRng};
pub use oprfcore::{BlindedInput, BlindingFactor, DomainCredential, ExchangeBlinder, Pid};
