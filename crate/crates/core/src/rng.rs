//! Seed derivation. Every stream in an experiment is derived from the
//! configured seed so published results are replayable.

/// One step of the splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and a list of stream labels.
pub fn derive_seed(parent: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(parent), |acc, l| splitmix64(acc ^ splitmix64(*l)))
}

/// Stable 64-bit hash of a string, for deriving per-concept streams.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Maps a seed to a uniform value in `[0, 1)`.
pub fn unit_f64(seed: u64) -> f64 {
    (splitmix64(seed) >> 11) as f64 / (1u64 << 53) as f64
}
