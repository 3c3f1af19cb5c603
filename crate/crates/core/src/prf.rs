//! Keyed 64-bit pseudorandom function built on the splitmix64 finalizer.
//!
//! Every source of randomness in the pipeline (shuffle keys, per-example
//! preprocessing seeds, epoch permutations) is derived from [`prf`], so the
//! whole system is bit-exact across platforms and runs.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output mix.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `PRF(k, x) = splitmix64(k ^ (x + gamma))`.
#[inline]
pub fn prf(key: u64, x: u64) -> u64 {
    splitmix64(key ^ x.wrapping_add(GOLDEN_GAMMA))
}

/// Left fold of [`prf`] over several arguments: `PRF(k, a, b) = PRF(PRF(k, a), b)`.
#[inline]
pub fn prf_fold(key: u64, args: &[u64]) -> u64 {
    args.iter().fold(key, |acc, &x| prf(acc, x))
}

/// Fold a byte string into a key. The length goes first so that
/// zero-padding of the final word cannot collide with a longer input.
pub fn prf_bytes(key: u64, bytes: &[u8]) -> u64 {
    let mut acc = prf(key, bytes.len() as u64);
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        acc = prf(acc, u64::from_le_bytes(word));
    }
    acc
}

/// Seed for the `op_index`-th preprocessor applied to the example at
/// `source_index`.
#[inline]
pub fn example_seed(pipeline_seed: u64, source_index: u64, op_index: u64) -> u64 {
    prf_fold(pipeline_seed, &[source_index, op_index])
}

/// Counter-mode generator: the `t`-th value is `PRF(seed, t)`.
///
/// Used wherever a sequence of random draws is needed (stochastic
/// preprocessors, Fisher-Yates permutations).
#[derive(Debug, Clone)]
pub struct CounterStream {
    seed: u64,
    counter: u64,
}

impl CounterStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = prf(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by multiply-shift. `bound` must be > 0.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Number of values drawn so far.
    pub fn position(&self) -> u64 {
        self.counter
    }
}

/// Fisher-Yates permutation of `0..n` driven by a counter stream.
///
/// Draws run from the top index down: for `i = n-1 ..= 1` swap `i` with a
/// uniform `j <= i`.
pub fn permutation(seed: u64, n: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut stream = CounterStream::new(seed);
    for i in (1..n).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}
