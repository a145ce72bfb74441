//! Named, splittable random streams.
//!
//! Every random draw in the crate comes from a stream identified by
//! `(master seed, purpose tag, index)`. The tag and seed pick the ChaCha key,
//! the index picks the ChaCha stream id, so any single task can be
//! regenerated without touching the others and results never depend on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

pub const TRAIN: &str = "train";
pub const SUBSPACE: &str = "subspace";
pub const DIAGNOSTICS: &str = "diagnostics";
pub const MAXMARGIN_SUBSAMPLE: &str = "maxmargin-subsample";
pub const TAILS: &str = "tails";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Tag used for test prompts with `m` in-context examples. Each context size
/// gets its own family of streams so pools for different `m` are independent.
pub fn test_tag(m: usize) -> String {
    format!("test/m={m}")
}

pub fn stream(seed: u64, tag: &str, index: u64) -> Stream {
    let mut state = seed ^ fnv1a(tag.as_bytes()).rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = Stream::from_seed(key);
    rng.set_stream(index);
    rng
}
