use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

/// The one PRNG used for initialization, sampling and shuffling.
pub type SeedRng = SplitMix64;

pub fn seeded_rng(seed: u64) -> SeedRng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // one splitmix64 finalizer round over the mixed pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
