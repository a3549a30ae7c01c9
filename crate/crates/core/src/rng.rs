//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream identified by a base seed and a salt path.
pub fn stream(seed: u64, salt: &[u64]) -> ChaCha8Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &x in salt {
        s = s.rotate_left(23) ^ x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        s = s.wrapping_mul(0x94D0_49BB_1331_11EB);
    }
    ChaCha8Rng::seed_from_u64(s)
}
