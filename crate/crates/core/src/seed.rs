//! Seed derivation. Every stage draws from its own stream, keyed by a label
//! hashed together with the root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `label` under `root`: FNV-1a over the label bytes,
/// mixed with the root seed through splitmix64.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Child seed for the `index`-th element of a stream (per image, per step).
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stage_rng(root: u64, label: &str) -> Rng {
    rng_from(derive_seed(root, label))
}
