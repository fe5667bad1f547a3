//! Seed-derived random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream derived
//! from the experiment seed plus a role tag (and round / client id where
//! applicable). Derivation is pure integer mixing, so streams are
//! identical across platforms and independent of execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_MODEL_INIT: u64 = 0x4d4f_4445;
pub const TAG_SYNTH: u64 = 0x5359_4e54;
pub const TAG_SPLIT: u64 = 0x5350_4c49;
pub const TAG_PARTITION: u64 = 0x5041_5254;
pub const TAG_SAMPLE: u64 = 0x5341_4d50;
pub const TAG_CLIENT: u64 = 0x434c_4945;
pub const TAG_SERVER: u64 = 0x5345_5256;
pub const TAG_CENTRAL: u64 = 0x4345_4e54;
pub const TAG_TEST_SPLIT: u64 = 0x5445_5354;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a list of role/index tags.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed);
    for &tag in tags {
        state = splitmix(state ^ splitmix(tag));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
