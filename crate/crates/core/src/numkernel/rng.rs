//! Seeded, portable random number generation.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): the state is a
//! 64-bit counter advanced by the golden-gamma constant and passed through a
//! fixed 3-round finalizer. The algorithm is pinned here so that seeds are
//! portable across platforms and releases:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z  = state
//! z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
//! z ^= z >> 27;  z *= 0x94D049BB133111EB
//! z ^= z >> 31
//! ```
//!
//! Uniform doubles take the top 53 bits of `z`; Gaussian draws use
//! Box-Muller with a cached spare, consuming exactly two uniforms per pair
//! in a fixed order.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_gaussian: Option<f64>,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            state: seed,
            spare_gaussian: None,
        }
    }

    /// Derives an independent stream from `(seed, stream)`. Used so that,
    /// for example, the epoch-`e` shuffle is a fixed function of the run
    /// seed and `e` alone, independent of how much randomness earlier
    /// epochs consumed.
    pub fn from_seed_stream(seed: u64, stream: u64) -> Self {
        Rng::seeded(mix64(seed).wrapping_add(mix64(stream ^ GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..n` by rejection (no modulo bias).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal draw via Box-Muller. The pair `(r cos t, r sin t)` is
    /// produced from two consecutive uniforms; the second member is cached
    /// and returned by the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare_gaussian.take() {
            return g;
        }
        // 1 - u keeps the argument of ln strictly positive.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
