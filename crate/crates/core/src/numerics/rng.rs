use rand::SeedableRng;

/// The one generator type used across the crate; always seeded explicitly.
pub type Rng = rand_pcg::Pcg64Mcg;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, index)`, so per-item content does not
/// depend on iteration order.
pub fn stream(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
