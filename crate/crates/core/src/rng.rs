//! Portable deterministic PRNG.
//!
//! Every stochastic operation in the toolkit draws from a SplitMix64 stream
//! seeded from `(global_seed, sample_index, op_id)` so that corruption
//! patterns, shuffles and initializations reproduce bit-for-bit across runs
//! and machines.

/// Fixed op ids used to derive independent streams from one global seed.
pub mod op_ids {
    pub const HEAD_INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const HFLIP: u64 = 4;
    pub const QUARTER_BLACK: u64 = 5;
    pub const CENTER_BLACK: u64 = 6;
    pub const LABEL_NOISE: u64 = 7;
    pub const SUBSET: u64 = 8;
    pub const SYNTHETIC: u64 = 9;
    pub const MODEL_INIT: u64 = 10;
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Stream derivation: mixes the three components through the SplitMix64
    /// finalizer so nearby seeds give unrelated streams.
    pub fn stream(global_seed: u64, sample_index: u64, op_id: u64) -> Self {
        let mut s = SplitMix64::new(global_seed);
        let a = s.next_u64();
        let mut t = SplitMix64::new(a ^ sample_index.wrapping_mul(0x9e3779b97f4a7c15));
        let b = t.next_u64();
        SplitMix64::new(b ^ op_id.wrapping_mul(0xbf58476d1ce4e5b9))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Modulo reduction; the bias at n << 2^64 is
    /// far below anything observable here and keeps the stream portable.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }
}
