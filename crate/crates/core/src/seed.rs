//! Seed derivation for reproducible sub-streams.
//!
//! A single 64-bit master seed feeds every experiment. Stream `k` gets
//! `derive_seed(master, k) = mix(master ^ mix(k + GOLDEN))`, where `mix` is
//! the SplitMix64 finalizer. The mapping is a pure function of
//! `(master, k)`, so a sweep yields the same per-point seeds no matter how
//! its jobs are scheduled.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(master ^ mix(stream.wrapping_add(GOLDEN)))
}
