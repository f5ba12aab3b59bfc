//! Seeded deterministic randomness.
//!
//! The generator is counter-based: draw `i` from seed `s` is
//! `splitmix64(s + i * GOLDEN)`, so a stream is a pure function of
//! `(seed, counter)` and identical across runs and platforms. Normals use the
//! trigonometric Box-Muller transform: one uniform pair yields two normals,
//! the second held until the next call.

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic random stream with a 64-bit seed and a draw counter.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    /// Second normal of a Box-Muller pair, held for the next call.
    cached_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0, cached_normal: None }
    }

    /// Derive a child stream from a seed and a label. Used so that e.g. each
    /// utterance owns an independent stream whose identity does not depend on
    /// generation order.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        // FNV-1a over the label folded into the seed, then one splitmix step.
        let mut h: u64 = 0xCBF29CE484222325 ^ seed;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001B3);
        }
        h ^= index.wrapping_mul(GOLDEN);
        RngStream::new(splitmix64(h))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)).wrapping_add(GOLDEN));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n). Rejection-free modulo is avoided; uses
    /// Lemire-style widening multiply with rejection for exactness.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n {
                return (m >> 64) as u64;
            }
            // reject the biased low band
            let threshold = n.wrapping_neg() % n;
            if low >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
