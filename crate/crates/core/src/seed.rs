//! Counter-based seed derivation: every consumer of randomness gets its own
//! stream derived from one root seed, so there is no shared RNG state.

/// SplitMix64 finalizer applied to `root` mixed with `stream`.
pub fn derive(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named stage, stable across releases.
pub fn stage(root: u64, name: &str) -> u64 {
    // FNV-1a of the stage name as the stream id
    let id = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    derive(root, id)
}
