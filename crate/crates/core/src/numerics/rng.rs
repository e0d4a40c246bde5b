//! Counter-based random number generation.
//!
//! Every random decision in the toolkit flows through a [`CounterRng`] that is
//! seeded explicitly and advanced by counting. There is no global RNG state:
//! a generator is a (key, counter) pair, and `derive` splits off statistically
//! independent child streams from a label, so corpus shards, batches and
//! parallel workers can each own a replayable stream.

/// Deterministic counter-based generator.
///
/// Each output is a strong 64-bit hash of `(key, counter)`; the counter
/// increments per draw. Two generators with the same key and counter produce
/// identical streams on every platform.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    /// Generator for a root seed.
    pub fn new(seed: u64) -> Self {
        CounterRng { key: mix(seed.wrapping_add(GOLDEN)), counter: 0 }
    }

    /// Child generator for a labelled sub-stream (layer name, batch index, ...).
    /// Children are independent of the parent's counter position.
    pub fn derive(&self, label: &str) -> Self {
        let mut k = self.key;
        for b in label.as_bytes() {
            k = mix(k ^ u64::from(*b)).wrapping_add(GOLDEN);
        }
        CounterRng { key: mix(k), counter: 0 }
    }

    /// Child generator indexed by an integer (per-sentence, per-shard streams).
    pub fn derive_idx(&self, idx: u64) -> Self {
        CounterRng { key: mix(self.key ^ mix(idx.wrapping_add(GOLDEN))), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        // 53 mantissa bits
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; two fresh draws per sample, no cache.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling keeps the distribution exactly uniform.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from [0, n) (k <= n), in random order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}
