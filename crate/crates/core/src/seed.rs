//! Seed derivation. Every random stream in the crate is keyed by a tuple of
//! integers so results do not depend on iteration or worker order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into one seed.
pub fn derive(keys: &[u64]) -> u64 {
    keys.iter().fold(0x1ADD_E125_1A3E_5EEDu64, |acc, &k| mix(acc ^ mix(k)))
}

/// FNV-1a of a string, for keying streams by parameter name.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(keys))
}

/// Seed of the view pair for one sample: independent of batch composition.
pub fn view_seed(global_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    derive(&[0x5649_4557, global_seed, epoch, sample_index])
}
