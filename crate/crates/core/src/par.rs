//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature the kernels can fan out over independent
//! output chunks with rayon. Every reduction that crosses chunks is done
//! afterwards in a fixed order, so both policies produce bit-identical
//! results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Defaults to `Parallel` when the feature is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Exec {
    /// Applies `f(index, chunk)` to each `chunk_len`-sized chunk of `out`.
    pub fn for_each_chunk<F>(self, out: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        match self {
            Exec::Sequential => out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
            #[cfg(feature = "parallel")]
            Exec::Parallel => out
                .par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }

    /// Like [`Exec::for_each_chunk`] but collects one value per chunk, in chunk order.
    pub fn map_chunks<T, F>(self, out: &mut [f64], chunk_len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &mut [f64]) -> T + Sync + Send,
    {
        if chunk_len == 0 {
            return Vec::new();
        }
        match self {
            Exec::Sequential => out
                .chunks_mut(chunk_len)
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => out
                .par_chunks_mut(chunk_len)
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect(),
        }
    }

    /// Maps `0..n` to values, in index order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }
}
