//! Counter-based random numbers.
//!
//! A draw is a pure function of `(seed, counter, lane)`, so a simulated field
//! does not depend on the order in which its sites are generated or on how
//! many threads generate them. The mixing function is the SplitMix64
//! finalizer applied twice with distinct odd multipliers on the inputs.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LANE_MULT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed.wrapping_add(GOLDEN)) }
    }

    #[inline]
    pub fn bits(&self, counter: u64, lane: u64) -> u64 {
        let c = mix64(counter.wrapping_mul(GOLDEN) ^ self.key);
        mix64(c ^ lane.wrapping_add(1).wrapping_mul(LANE_MULT))
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, counter: u64, lane: u64) -> f64 {
        ((self.bits(counter, lane) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on lanes 0 and 1 of `counter`.
    #[inline]
    pub fn standard_normal(&self, counter: u64) -> f64 {
        let u1 = self.uniform(counter, 0);
        let u2 = self.uniform(counter, 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
