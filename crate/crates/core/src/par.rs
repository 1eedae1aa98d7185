//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) the loops below run on the rayon
//! pool; without it they run in order on the calling thread. Every helper
//! hands each worker a disjoint output chunk and never reduces across
//! chunks, so results are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized chunks of `out`.
pub fn for_each_chunk<F>(out: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Like [`for_each_chunk`] but walks two outputs in lock step.
pub fn for_each_chunk2<T, U, F>(a: &mut [T], a_len: usize, b: &mut [U], b_len: usize, f: F)
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Send + Sync,
{
    if a_len == 0 || b_len == 0 || a.is_empty() {
        return;
    }
    debug_assert_eq!(a.len() / a_len, b.len() / b_len);
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(a_len)
        .zip(b.par_chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
