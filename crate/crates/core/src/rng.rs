//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream for `(seed, purpose, a, b)`.
///
/// Different purposes and indices never share a stream, so adding draws in one
/// place does not shift the values drawn elsewhere.
pub fn stream(seed: u64, purpose: &str, a: u64, b: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut key = 0xcbf2_9ce4_8422_2325u64;
    for byte in purpose.bytes() {
        key ^= byte as u64;
        key = key.wrapping_mul(0x0000_0100_0000_01b3);
    }
    rng.set_stream(key ^ a.rotate_left(32) ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}
