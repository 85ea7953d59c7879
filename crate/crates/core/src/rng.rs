//! Named, derived random streams.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is derived from
//! `(root seed, stream name, index)` as
//!
//! ```text
//! seed = splitmix64(splitmix64(root ^ fnv1a64(name)) ^ index)
//! ```
//!
//! ChaCha8 output is specified independently of platform and word size, so a
//! given `(root, name, index)` produces the same sequence everywhere. Training
//! derives one stream per `(purpose, step)`, which makes any step replayable
//! from the step counter alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_DATA: &str = "data";
pub const STREAM_NOISE: &str = "noise";
pub const STREAM_TAU: &str = "tau";
pub const STREAM_ANCHOR: &str = "anchor";
pub const STREAM_INIT: &str = "init";
pub const STREAM_EVAL: &str = "eval";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the 64-bit seed of a named sub-stream.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(name.as_bytes())) ^ index)
}

/// Open the named sub-stream `index` of `root`.
pub fn stream(root: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, index))
}
