//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool;
//! without it (or after `set_enabled(false)`) they run on the calling
//! thread. Every helper preserves item order and leaves reductions to the
//! caller, so results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Toggles parallel execution at runtime. No effect without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Runs `f` over consecutive `chunk`-sized pieces of `data`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Elementwise in-place map.
pub fn map_inplace<F>(data: &mut [f64], f: F)
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    const GRAIN: usize = 1 << 14;
    for_each_chunk_mut(data, GRAIN, |_, c| {
        for x in c {
            *x = f(*x);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0usize; 103];
        for_each_chunk_mut(&mut v, 10, |i, c| {
            for x in c.iter_mut() {
                *x += i + 1;
            }
        });
        assert_eq!(v[0], 1);
        assert_eq!(v[102], 11);
        assert!(v.iter().all(|&x| x > 0));
    }
}
