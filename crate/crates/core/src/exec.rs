//! Execution mode switch.
//!
//! Kernels that parallelise do so over independent output slices and reduce
//! partial results in a fixed order, so results do not depend on the thread
//! count. Sequential mode additionally keeps everything on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    SEQUENTIAL.load(Ordering::Relaxed)
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    if is_sequential() || out.len() <= chunk {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Maps `0..n` to a vector, preserving order.
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    if is_sequential() || n <= 1 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}
