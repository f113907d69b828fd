use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic child seed for stream `tag`, item `index`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(seed, tag, index))
}

// Stream tags keep the derived seed families apart.
pub(crate) const TAG_AUGMENT: u64 = 1;
pub(crate) const TAG_DEFECT: u64 = 2;
pub(crate) const TAG_DATASET: u64 = 3;
pub(crate) const TAG_TRAIN: u64 = 4;
pub(crate) const TAG_INIT: u64 = 5;
pub(crate) const TAG_BANK: u64 = 6;
pub(crate) const TAG_SPLIT: u64 = 7;
pub(crate) const TAG_PHANTOM: u64 = 8;
pub(crate) const TAG_EPOCH: u64 = 9;
