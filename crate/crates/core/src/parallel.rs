//! Parallel-or-serial loop helpers.
//!
//! Every kernel assigns each output element to exactly one task and never
//! reduces across tasks, so results are bitwise identical whether the rayon
//! path or the serial fallback runs, and for any thread count.

/// Work-size threshold (in multiply-adds) below which splitting is not worth it.
#[cfg(feature = "std")]
pub const PAR_THRESHOLD: usize = 1 << 15;

#[cfg(feature = "std")]
pub fn for_each_chunk<F>(data: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    if work >= PAR_THRESHOLD {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(not(feature = "std"))]
pub fn for_each_chunk<F>(data: &mut [f64], chunk: usize, _work: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `0..n` in parallel, collecting results in index order (so the output
/// is independent of scheduling).
#[cfg(feature = "std")]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> alloc::vec::Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "std"))]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> alloc::vec::Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
