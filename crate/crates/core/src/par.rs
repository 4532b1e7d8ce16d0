//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! run the same closures sequentially. Callers split work so that every output
//! element is produced by exactly one closure invocation, which keeps results
//! bit-identical regardless of thread count.

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, parallel: bool, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if parallel {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        } else {
            data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }

    pub fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        if parallel {
            (0..n).into_par_iter().map(f).collect()
        } else {
            (0..n).map(f).collect()
        }
    }

    pub fn current_threads() -> usize {
        rayon::current_num_threads()
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, _parallel: bool, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    pub fn map_range<R, F>(n: usize, _parallel: bool, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }

    pub fn current_threads() -> usize {
        1
    }
}

pub use imp::{current_threads, for_each_chunk, map_range};

/// Whether a kernel with `work` multiply-adds split into `chunks` pieces is worth
/// handing to the thread pool.
#[inline]
pub fn worth_it(work: usize, chunks: usize) -> bool {
    cfg!(feature = "parallel") && chunks > 1 && work >= MIN_PARALLEL_WORK
}
