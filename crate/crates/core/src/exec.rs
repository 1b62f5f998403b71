//! Data-parallel execution with a sequential fallback.
//!
//! Batch operations (corpus formatting, pair counting, batched generation)
//! take an [`Execution`] so callers and benchmarks can pick the strategy at
//! runtime. Without the `parallel` feature only [`Execution::Sequential`]
//! exists. Both strategies preserve input order, so results are identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Execution {
    /// Ordered map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
        }
    }

    /// Ordered map over an index range.
    pub fn map_range<R, F>(self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..len).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..len).into_par_iter().map(f).collect(),
        }
    }

    /// Map each item to a value and fold all values with an associative,
    /// commutative `combine`. Used for exact integer count tables.
    pub fn map_reduce<T, R, F, I, C>(self, items: &[T], map: F, identity: I, combine: C) -> R
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
        I: Fn() -> R + Sync + Send,
        C: Fn(R, R) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(map).fold(identity(), combine),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(map).reduce(identity, combine),
        }
    }
}

/// SplitMix64 finalizer. Derives independent seeds for per-item RNG streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across platforms and runs.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&items, |x| x * 3);
        let dflt = Execution::default().map(&items, |x| x * 3);
        assert_eq!(seq, dflt);
        let total = Execution::default().map_reduce(&items, |x| *x, || 0, |a, b| a + b);
        assert_eq!(total, 999 * 1000 / 2);
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(mix_seed(7, 1), mix_seed(7, 2));
        assert_eq!(mix_seed(7, 1), mix_seed(7, 1));
        assert_eq!(stable_hash(b""), 0xcbf2_9ce4_8422_2325);
    }
}
