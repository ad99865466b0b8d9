//! Data-parallel helpers.
//!
//! Work is always split into the same items regardless of thread count, and
//! results are returned in item order, so parallel and sequential execution
//! produce bit-identical output. With the `parallel` feature disabled every
//! helper runs sequentially; with it enabled, [`set_parallel`] switches between
//! the two at runtime (used by the benches).

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables rayon execution. Has no effect without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f` to each fixed-size chunk of `data` together with its chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_indices_cover_slice() {
        let mut data = vec![0usize; 37];
        for_each_chunk_mut(&mut data, 8, |ci, c| c.iter_mut().for_each(|x| *x = ci));
        assert_eq!(data[0], 0);
        assert_eq!(data[8], 1);
        assert_eq!(data[36], 4);
    }
}
