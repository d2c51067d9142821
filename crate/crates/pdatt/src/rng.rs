//! Deterministic stream derivation. Every random draw in the crate comes
//! from a ChaCha12 stream keyed by (seed, stream, substream), so each
//! replication's data are a pure function of the seed and its index,
//! independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const TAG: u64 = 0x7064_6174_745f_7631; // "pdatt_v1"

/// A generator for the given (seed, stream, substream) triple.
pub fn stream_rng(seed: u64, stream: u64, substream: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&substream.to_le_bytes());
    key[24..32].copy_from_slice(&TAG.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
