//! Seed derivation for independent random streams.

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `stream` under `master`; distinct streams give
/// unrelated seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Seed for a path of stream indices, e.g. `(sweep point, replicate, image)`.
pub fn derive_path(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |s, &p| derive_seed(s, p))
}
