//! Deterministic intra-op parallelism.
//!
//! Kernels may partition their output into disjoint slabs and fill slabs on
//! worker threads. Every output element is produced by exactly one worker
//! with a fixed per-element reduction order, so results are bit-identical to
//! the sequential path regardless of thread count.
//!
//! `TXNET_THREADS` caps the worker count; `0` forces the sequential path.

use std::env;

/// Small slabs are not worth spawning threads for.
const MIN_ELEMS_PER_WORKER: usize = 16 * 1024;

/// Maximum worker count from `TXNET_THREADS` or the machine's parallelism.
pub fn worker_cap() -> usize {
    match env::var("TXNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => 1,
            Ok(n) => n,
            Err(_) => 1,
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Worker count for a job of `total_elems` output elements.
pub fn workers_for(total_elems: usize) -> usize {
    let by_work = total_elems / MIN_ELEMS_PER_WORKER;
    worker_cap().min(by_work).max(1)
}

/// Split `out` into consecutive slabs of `slab_len` elements and run
/// `fill(slab_index, slab)` for each, distributing contiguous runs of slabs
/// over worker threads. `slab_len` must divide `out.len()`.
pub fn for_each_slab<E, F>(out: &mut [E], slab_len: usize, fill: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    debug_assert!(slab_len > 0 && out.len() % slab_len == 0);
    let n_slabs = out.len() / slab_len;
    let workers = workers_for(out.len()).min(n_slabs);
    if workers <= 1 {
        for (i, slab) in out.chunks_mut(slab_len).enumerate() {
            fill(i, slab);
        }
        return;
    }

    // Contiguous ranges of slabs per worker keep writes cache-friendly.
    let per = n_slabs.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut first = 0usize;
        while !rest.is_empty() {
            let take = per.min(rest.len() / slab_len);
            let (chunk, tail) = rest.split_at_mut(take * slab_len);
            let fill = &fill;
            scope.spawn(move || {
                for (i, slab) in chunk.chunks_mut(slab_len).enumerate() {
                    fill(first + i, slab);
                }
            });
            rest = tail;
            first += take;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_every_slab_once() {
        let mut out = vec![0u32; 64 * 1024];
        for_each_slab(&mut out, 1024, |i, slab| {
            for v in slab.iter_mut() {
                *v = i as u32 + 1;
            }
        });
        for (i, chunk) in out.chunks(1024).enumerate() {
            assert!(chunk.iter().all(|&v| v == i as u32 + 1));
        }
    }

    #[test]
    fn sequential_matches_parallel() {
        let fill = |i: usize, slab: &mut [u64]| {
            let mut acc = i as u64;
            for (j, v) in slab.iter_mut().enumerate() {
                acc = acc.wrapping_mul(6364136223846793005).wrapping_add(j as u64);
                *v = acc;
            }
        };
        let mut a = vec![0u64; 128 * 1024];
        let mut b = vec![0u64; 128 * 1024];
        for_each_slab(&mut a, 512, fill);
        for (i, slab) in b.chunks_mut(512).enumerate() {
            fill(i, slab);
        }
        assert_eq!(a, b);
    }
}
