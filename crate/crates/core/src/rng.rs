//! Keyed, splittable random streams.
//!
//! Every stream is derived from a global seed plus a path of integer keys
//! (volume id, crop index, ...). Two streams with the same key path always
//! produce the same sequence, independent of the order in which they are
//! created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KeyedRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key path into a single 64-bit key.
pub fn derive_key(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stream for `(seed, keys...)`.
pub fn keyed_rng(seed: u64, keys: &[u64]) -> KeyedRng {
    let k = derive_key(seed, keys);
    let mut bytes = [0u8; 32];
    let mut state = k;
    for chunk in bytes.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// FNV-1a hash of a name, for keying streams by string.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

/// Stream-purpose tags, so different consumers of the same volume never share draws.
pub mod purpose {
    pub const SYNTH: u64 = 1;
    pub const SPATIAL: u64 = 2;
    pub const CROP: u64 = 3;
    pub const INTENSITY: u64 = 4;
    pub const MASK: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const GRADCHECK: u64 = 9;
}
