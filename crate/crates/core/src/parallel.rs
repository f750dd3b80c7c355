//! Data-parallel helpers.
//!
//! With the `parallel` feature enabled these fan work out over rayon; without it
//! (or after [`set_serial`]) every helper runs the same closure sequentially.
//! Each helper writes disjoint output chunks, so results are bit-identical in
//! both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SERIAL: AtomicBool = AtomicBool::new(false);

/// Force fully serial execution for the rest of the process.
pub fn set_serial(serial: bool) {
    FORCE_SERIAL.store(serial, Ordering::SeqCst);
}

/// True when helpers will actually fan out across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SERIAL.load(Ordering::Relaxed)
}

// Below this many output elements the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 4096;

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len`-sized pieces of `out`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && out.len() >= MIN_PARALLEL_WORK && out.len() > chunk_len {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Ordered map over a slice; output order always matches input order.
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && items.len() > 1 {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_write_matches_serial() {
        let mut a = vec![0.0f64; 10_000];
        for_each_chunk_mut(&mut a, 7, |i, c| {
            for (k, x) in c.iter_mut().enumerate() {
                *x = (i * 7 + k) as f64 * 0.5;
            }
        });
        for (k, x) in a.iter().enumerate() {
            assert_eq!(*x, k as f64 * 0.5);
        }
    }

    #[test]
    fn map_keeps_order() {
        let v: Vec<usize> = (0..100).collect();
        let out = map_ordered(&v, |x| x * 2);
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
