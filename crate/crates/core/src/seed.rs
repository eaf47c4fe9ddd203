//! Platform-stable hashing for seeded, order-independent random decisions.
//!
//! Noise draws (retrieval drops, scorer flips, random selection) are keyed on
//! the content they apply to rather than drawn from a shared stream, so the
//! outcome of one call never depends on how many calls came before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-question seed: the global seed xor-ed with a hash of the question id.
pub fn derive_seed(global: u64, question_id: &str) -> u64 {
    global ^ fnv1a(question_id.as_bytes())
}

/// Accumulates key parts into a 64-bit draw.
#[derive(Debug, Clone, Copy)]
pub struct Draw(u64);

impl Draw {
    pub fn new(seed: u64) -> Self {
        Draw(splitmix(seed))
    }

    pub fn with(self, part: &str) -> Self {
        // Length prefix keeps ("ab","c") and ("a","bc") apart.
        let h = fnv1a(part.as_bytes()) ^ (part.len() as u64).rotate_left(32);
        Draw(splitmix(self.0 ^ h))
    }

    pub fn with_u64(self, part: u64) -> Self {
        Draw(splitmix(self.0 ^ splitmix(part)))
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn unit(self) -> f64 {
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn bernoulli(self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn parts_are_not_concatenated() {
        let a = Draw::new(1).with("ab").with("c").bits();
        let b = Draw::new(1).with("a").with("bc").bits();
        assert_ne!(a, b);
    }

    #[test]
    fn unit_is_roughly_uniform() {
        let n = 20_000;
        let mean = (0..n).map(|i| Draw::new(7).with_u64(i).unit()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }
}
