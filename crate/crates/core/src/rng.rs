//! Counter-based splittable random number generator.
//!
//! Every draw is `mix(key, counter)` where `mix` is the SplitMix64 finalizer,
//! so a stream is a pure function of (seed, position): identical seeds give
//! bitwise-identical streams on every platform, and child streams derived by
//! index are independent and reproducible regardless of how much the parent
//! has been consumed.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic counter-based RNG stream.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    /// Algorithm identifier recorded in manifests and provenance blocks.
    pub const ALGORITHM: &'static str = "splitmix64-counter";

    pub fn new(seed: u64) -> Self {
        Rng { key: splitmix64(seed.wrapping_add(GOLDEN)), counter: 0 }
    }

    /// Derives an independent child stream. Children with distinct indices
    /// never collide, and the derivation ignores the parent's position.
    pub fn child(&self, index: u64) -> Rng {
        let key = splitmix64(self.key ^ splitmix64(index.wrapping_mul(GOLDEN).wrapping_add(1)));
        Rng { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Desk-scale n is tiny relative to 2^64; modulo bias is negligible
        // and the mapping stays platform-independent.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (always consumes exactly two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal truncated to +/- 2 standard deviations, scaled by `std`.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let v = self.normal();
            if v.abs() <= 2.0 {
                return v * std;
            }
        }
    }

    /// Deterministic in-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
