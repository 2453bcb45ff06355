//! Splittable counter-based random streams. Every stream is keyed by a
//! 64-bit key; children are derived by mixing a tag into the parent key, so
//! disjoint (sequence id, purpose tag) paths never share state.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; a good 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn combine(key: u64, tag: u64) -> u64 {
    mix(key ^ mix(tag))
}

/// Stream purpose tags; keep values stable for reproducibility.
pub mod tag {
    pub const GENERATE: u64 = 1;
    pub const CHAIN: u64 = 2;
    pub const VARIATIONAL: u64 = 3;
    pub const FUTURE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn root(seed: u64) -> Self {
        Self::from_key(mix(seed))
    }

    pub fn from_key(key: u64) -> Self {
        let mut seed = [0u8; 32];
        let mut s = key;
        for chunk in seed.chunks_mut(8) {
            s = mix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self { key, rng: ChaCha8Rng::from_seed(seed) }
    }

    /// Child stream for (tag). Pure function of the parent key; does not
    /// consume parent randomness.
    pub fn split(&self, t: u64) -> Self {
        Self::from_key(combine(self.key, t))
    }

    /// Child stream for (tag, index), e.g. (purpose, sequence id).
    pub fn split2(&self, t: u64, index: u64) -> Self {
        Self::from_key(combine(combine(self.key, t), index))
    }

    /// Uniform draw on (0, 1]; never returns 0 so `ln` is safe.
    pub fn uniform(&mut self) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u == 0.0 {
            f64::MIN_POSITIVE
        } else {
            u
        }
    }

    /// Unit-exponential draw.
    pub fn exp1(&mut self) -> f64 {
        -self.uniform().ln()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        // rejection sampling over the top bits; unbiased
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}
