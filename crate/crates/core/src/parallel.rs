//! Data-parallel helpers whose results do not depend on the number of worker threads.
//!
//! Work is split into fixed-size path chunks. Partial results are collected in chunk
//! order and combined by a pairwise tree of fixed shape, so floating-point sums are
//! bitwise reproducible for any pool size.

use std::ops::Range;

use rayon::prelude::*;

/// Number of paths per work unit.
pub const CHUNK: usize = 2048;

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Maps every chunk of `0..n` to a partial result and tree-reduces the partials.
pub fn map_reduce<R, M, C>(n: usize, identity: R, map: M, combine: C) -> R
where
    R: Send + Clone,
    M: Fn(Range<usize>) -> R + Sync,
    C: Fn(R, R) -> R + Sync,
{
    let mut parts: Vec<R> = chunk_ranges(n).into_par_iter().map(&map).collect();
    if parts.is_empty() {
        return identity;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().unwrap_or(identity)
}

/// Runs `f(path_range, block)` over disjoint per-path blocks of `data`, where each path
/// owns `width` consecutive entries.
pub fn for_each_block<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(Range<usize>, &mut [T]) + Sync,
{
    if width == 0 {
        return;
    }
    data.par_chunks_mut(CHUNK * width)
        .enumerate()
        .for_each(|(c, block)| {
            let start = c * CHUNK;
            f(start..start + block.len() / width, block)
        });
}

/// Like [`for_each_block`] but each block may fail; the error from the lowest chunk wins.
pub fn try_for_each_block<T, E, F>(data: &mut [T], width: usize, f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(Range<usize>, &mut [T]) -> Result<(), E> + Sync,
{
    if width == 0 {
        return Ok(());
    }
    let results: Vec<Result<(), E>> = data
        .par_chunks_mut(CHUNK * width)
        .enumerate()
        .map(|(c, block)| {
            let start = c * CHUNK;
            f(start..start + block.len() / width, block)
        })
        .collect();
    results.into_iter().collect()
}

/// Runs `f` inside a dedicated pool with `threads` workers (0 means the global pool).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
