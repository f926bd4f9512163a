//! Counter-based normal generator.
//!
//! Element `i` of a stream is a pure function of `(seed, i)`, so tensors are
//! reproducible regardless of generation order. Uniforms come from the
//! SplitMix64 finalizer applied to `key + (i + 1) * GOLDEN_GAMMA`, where
//! `key = mix(seed)`. Consecutive uniform pairs feed a Box–Muller transform:
//! pair `p` uses uniforms `2p` and `2p + 1` and yields the cosine branch for
//! even elements and the sine branch for odd ones. Transcendentals go through
//! `libm` so results do not depend on the platform math library.

/// Weyl-sequence increment (2^64 / golden ratio).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// First SplitMix64 finalizer multiplier.
pub const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
/// Second SplitMix64 finalizer multiplier.
pub const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Stateless normal stream keyed by a seed.
#[derive(Debug, Clone, Copy)]
pub struct NormalStream {
    key: u64,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed) }
    }

    #[inline]
    fn raw(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in (0, 1], 53-bit resolution.
    #[inline]
    pub fn uniform_open(&self, counter: u64) -> f64 {
        ((self.raw(counter) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.raw(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal sample for element `index`.
    pub fn normal(&self, index: u64) -> f64 {
        let pair = index / 2;
        let u1 = self.uniform_open(2 * pair);
        let u2 = self.uniform(2 * pair + 1);
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        if index.is_multiple_of(2) {
            radius * libm::cos(angle)
        } else {
            radius * libm::sin(angle)
        }
    }
}
