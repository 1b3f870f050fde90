//! End-to-end toolkit for studying knowledge-base poisoning of
//! retrieval-augmented generation (RAG) and detecting poisoned responses
//! from model activations.
//!
//! The pipeline: build or ingest a QA corpus ([`corpus`]), index it with a
//! deterministic hashed n-gram encoder ([`embed`], [`retrieve`]), inject
//! poisoned documents ([`attack`]), answer questions with a small trainable
//! decoder-only transformer while capturing last-token activations
//! ([`langmodel`]), assemble a normalized activation dataset ([`probedata`]),
//! train a triplet-embedding detector with support-set nearest-neighbor
//! classification ([`detector`]), and evaluate TPR/FPR plus ablations
//! ([`evaluate`]). [`pipeline`] wires the stages together behind a single
//! JSON config.

pub mod attack;
pub mod autodiff;
pub mod corpus;
pub mod detector;
pub mod embed;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod langmodel;
pub mod pipeline;
pub mod probedata;
pub mod retrieve;

pub use error::Error;

/// Derive a per-stage RNG seed from a global seed and a stage tag.
///
/// FNV-1a over the tag bytes mixed into the seed, so distinct stages of one
/// run never share an RNG stream.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
