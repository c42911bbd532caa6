//! Counter-based deterministic random number generation.
//!
//! All randomness in the crate is derived from a `u64` seed through the
//! splitmix64 finalizer. A draw is a pure function of `(seed, stream ids)`,
//! so substreams keyed by `(channel, trace, sample)` can be evaluated in
//! any order — serial and parallel generation produce identical output,
//! and adding a channel never perturbs another channel's stream.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a stream value from a seed and a list of stream identifiers.
/// The fold multiplies the running state before mixing in each id, so the
/// combination is neither commutative in the ids nor symmetric between
/// seed and id.
#[inline]
pub fn derive(seed: u64, ids: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for &id in ids {
        h = mix64(h.wrapping_mul(GOLDEN) ^ mix64(id));
    }
    h
}

/// Maps 64 random bits to a double in the half-open interval [0, 1).
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    // 53 mantissa bits; exact in IEEE 754 double precision.
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviate for the given stream, via Box–Muller.
///
/// Uses exactly two sub-draws of the stream so the cost per sample is
/// fixed and the value depends only on `(seed, ids)`.
pub fn gauss(seed: u64, ids: &[u64]) -> f64 {
    let h = derive(seed, ids);
    // u1 in (0, 1] so the log is finite.
    let u1 = (((mix64(h) >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64);
    let u2 = unit_f64(mix64(h ^ GOLDEN));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sequential substream for the few places that need a stream of draws
/// (plaintext generation, shuffles) rather than counter addressing.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, ids: &[u64]) -> Self {
        Stream {
            state: derive(seed, ids),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = derive(self.state, &[self.counter]);
        self.counter += 1;
        v
    }

    #[inline]
    pub fn next_byte(&mut self) -> u8 {
        // 2^64 is divisible by 256, so truncation is unbiased.
        (self.next_u64() & 0xFF) as u8
    }

    /// Unbiased draw in `0..n` by rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_order_sensitive() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[1]));
    }

    #[test]
    fn derive_is_reproducible() {
        assert_eq!(derive(42, &[7, 9]), derive(42, &[7, 9]));
    }

    #[test]
    fn unit_range() {
        for i in 0..1000u64 {
            let u = unit_f64(mix64(i));
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gauss_moments() {
        let n = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..n {
            let z = gauss(123, &[i]);
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn stream_bytes_cover_range() {
        let mut s = Stream::new(5, &[1]);
        let mut seen = [false; 256];
        for _ in 0..20_000 {
            seen[s.next_byte() as usize] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut s = Stream::new(9, &[]);
        let mut v: Vec<u32> = (0..100).collect();
        s.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
