//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from the single root seed by
//! folding a path of integers (module tag, iteration, query id, agent,
//! draft index, ...) through SplitMix64. Two callers that ask for the same
//! path always get the same stream, independent of scheduling.

/// One round of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `path` into `root`.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags, so that e.g. generation and evaluation never share a stream.
pub mod tag {
    pub const GENERATION: u64 = 1;
    pub const EVALUATION: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SUITE: u64 = 6;
}
