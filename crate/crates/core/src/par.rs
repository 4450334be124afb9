//! Data-parallel helpers. With the `parallel` feature (default) work is spread
//! over a rayon pool sized by `BEARLAB_THREADS`; without it, or with
//! [`Exec::Sequential`], everything runs on the calling thread. Results are
//! always returned in input order.

#[cfg(feature = "parallel")]
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("BEARLAB_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            b = b.num_threads(n);
        }
        b.build().expect("thread pool")
    })
}

/// Number of worker threads `map` may use.
pub fn threads(exec: Exec) -> usize {
    match exec {
        Exec::Sequential => 1,
        #[cfg(feature = "parallel")]
        Exec::Parallel => pool().current_num_threads(),
        #[cfg(not(feature = "parallel"))]
        Exec::Parallel => 1,
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            pool().install(|| items.par_iter().map(&f).collect())
        }
        _ => items.iter().map(f).collect(),
    }
}
