//! Deterministic RNG stream derivation.
//!
//! Every randomized routine takes its own stream derived from a master seed
//! plus a list of tags (replicate index, draw index, purpose). Streams are
//! independent of thread count and execution order, so parallel and serial
//! runs of the simulation harness produce identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::stats::fnv1a;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tag from a human-readable label.
pub fn tag(label: &str) -> u64 {
    fnv1a(label.as_bytes())
}

/// Derive an independent ChaCha8 stream from `(master, tags...)`.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        let mut ts = t ^ 0xbb67_ae85_84ca_a73b;
        acc ^= splitmix64(&mut ts);
        state ^= acc;
        acc = splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
