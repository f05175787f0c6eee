//! Data-parallel helpers.
//!
//! With the `parallel` feature these run on the rayon pool; without it they
//! fall back to plain iterators. Results are always returned in input order
//! and reductions are done sequentially by the caller, so output does not
//! depend on the thread count.

pub use self::actual::{map_collect, map_range};

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    /// Maps a slice into a vector, preserving order.
    pub fn map_collect<T, R, F>(source: &[T], map_op: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        source.par_iter().map(map_op).collect()
    }

    /// Maps `0..n` into a vector, preserving order.
    pub fn map_range<R, F>(n: usize, map_op: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(map_op).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn map_collect<T, R, F>(source: &[T], map_op: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        source.iter().map(map_op).collect()
    }

    pub fn map_range<R, F>(n: usize, map_op: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(map_op).collect()
    }
}

/// Runs `f` on a single thread: inside a one-thread pool when parallel, or
/// directly otherwise. Used by the benches to compare both paths.
pub fn sequential<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..1000).collect();
        let out = map_collect(&v, |x| x * 2);
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn sequential_matches() {
        let a = map_range(100, |i| (i as f64).sqrt());
        let b = sequential(|| map_range(100, |i| (i as f64).sqrt()));
        assert_eq!(a, b);
    }
}
