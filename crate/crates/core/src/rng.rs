//! Seedable SplitMix64 generator.
//!
//! The stream is fully specified so other implementations can reproduce it:
//!
//! ```text
//! state  <- state + 0x9E3779B97F4A7C15          (wrapping)
//! z      <- state
//! z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (wrapping)
//! z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB  (wrapping)
//! output <- z ^ (z >> 31)
//! ```
//!
//! Uniform doubles take the top 53 bits: `(output >> 11) * 2^-53`, in `[0, 1)`.
//! Standard normals use Box-Muller on two uniforms `u1, u2` with
//! `r = sqrt(-2 ln(1 - u1))`, returning `r cos(2π u2)`; the sine branch is
//! discarded so every normal consumes exactly two outputs.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Draws an index with probability proportional to `weights`.
    ///
    /// Weights must be nonnegative with a positive sum.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.next_f64() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        // Rounding can leave target == total; fall back to the last positive weight.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_range(0, i);
            items.swap(i, j);
        }
    }

    /// Independent child stream; used to give each scan its own generator.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}
