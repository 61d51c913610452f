//! Stable seed derivation.
//!
//! Every random draw in a run is seeded from a hash of its coordinates
//! (run seed, query, iteration, sample, ...) so the result never depends on
//! scheduling order or on the platform's default hasher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One coordinate of a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Int(u64),
    Str(&'a str),
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<u32> for SeedPart<'_> {
    fn from(v: u32) -> Self {
        SeedPart::Int(v as u64)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(v: &'a str) -> Self {
        SeedPart::Str(v)
    }
}

impl<'a> From<&'a String> for SeedPart<'a> {
    fn from(v: &'a String) -> Self {
        SeedPart::Str(v.as_str())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Fold an ordered list of coordinates into a single 64-bit seed.
pub fn derive_seed(parts: &[SeedPart<'_>]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, part| {
        let v = match part {
            SeedPart::Int(i) => splitmix64(*i),
            SeedPart::Str(s) => splitmix64(fnv1a(s.as_bytes())),
        };
        splitmix64(acc ^ v)
    })
}

/// `derive_seed!(a, b, c)` with any mix of integers and strings.
#[macro_export]
macro_rules! derive_seed {
    ($($part:expr),+ $(,)?) => {
        $crate::seed::derive_seed(&[$($crate::seed::SeedPart::from($part)),+])
    };
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
