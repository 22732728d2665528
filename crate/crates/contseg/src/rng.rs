//! Deterministic RNG derivation.
//!
//! Every stochastic site in the pipeline (dataset synthesis, parameter init,
//! per-task batch sampling, …) owns an RNG derived from the master seed plus a
//! stable string label and an integer lane. Deriving rather than sharing one
//! stream means inserting a draw at one site never perturbs another, and a run
//! resumed at a task boundary replays the remaining tasks bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// 64-bit mix (splitmix64 finalizer); good avalanche for seed folding.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fold_label(label: &str) -> u64 {
    // FNV-1a over the label bytes, then mixed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Derive an independent RNG from `(seed, label, lane)`.
pub fn derive(seed: u64, label: &str, lane: u64) -> ChaCha12Rng {
    let s = mix(seed ^ fold_label(label)).wrapping_add(mix(lane.wrapping_mul(0xa076_1d64_78bd_642f)));
    ChaCha12Rng::seed_from_u64(mix(s))
}

/// A single derived u64, for decisions too small to deserve an RNG stream.
pub fn derive_u64(seed: u64, label: &str, lane: u64) -> u64 {
    mix(seed ^ fold_label(label) ^ mix(lane))
}
