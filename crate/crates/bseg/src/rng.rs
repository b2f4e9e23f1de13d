//! Counter-based deterministic random numbers.
//!
//! Every random draw in the crate is a pure function of a key
//! `(seed, stream, step)` plus a per-draw counter. Nothing holds hidden
//! state, so parallel evaluation order cannot change any result: dropout
//! masks, weight initialization, shuffles and synthetic scenes are all
//! reproducible bit-for-bit from their keys.

/// Domain tags keep independent consumers of the same run seed from
/// overlapping in key space.
pub mod domain {
    pub const INIT: u64 = 0x01;
    pub const DROPOUT: u64 = 0x02;
    pub const SPLIT: u64 = 0x03;
    pub const EPOCH_SHUFFLE: u64 = 0x04;
    pub const VALIDATION: u64 = 0x05;
    pub const SCENE: u64 = 0x06;
    pub const MC_SAMPLE: u64 = 0x07;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix any number of words into one well-avalanched u64.
pub fn mix(words: &[u64]) -> u64 {
    let mut acc = 0x9e3779b97f4a7c15u64;
    for &w in words {
        acc = splitmix(
            acc.wrapping_add(0x9e3779b97f4a7c15)
                .wrapping_mul(0x2545f4914f6cdd1d)
                ^ w,
        );
    }
    splitmix(acc)
}

/// A stateless key identifying one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
    pub step: u64,
}

impl RngKey {
    pub fn new(seed: u64, stream: u64, step: u64) -> Self {
        RngKey { seed, stream, step }
    }

    /// The n-th raw word of this stream.
    #[inline]
    pub fn word(&self, counter: u64) -> u64 {
        mix(&[self.seed, self.stream, self.step, counter])
    }

    /// The n-th uniform draw in [0, 1), with 53 bits of mantissa.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.word(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Sequential convenience wrapper over an [`RngKey`] for code that wants a
/// classic draw-after-draw generator (initialization, shuffles, scenes).
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: RngKey,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: RngKey) -> Self {
        CounterRng { key, counter: 0 }
    }

    pub fn from_parts(seed: u64, stream: u64, step: u64) -> Self {
        Self::new(RngKey::new(seed, stream, step))
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.key.word(self.counter);
        self.counter += 1;
        w
    }

    pub fn next_f64(&mut self) -> f64 {
        let u = self.key.uniform(self.counter);
        self.counter += 1;
        u
    }

    /// Uniform draw in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
