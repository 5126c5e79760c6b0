//! Data-parallel helpers. With the `parallel` feature the work is spread over a rayon
//! pool; without it (or with [`Mode::Sequential`]) everything runs on the caller's thread.
//! Results always come back in input order, so reductions over them are deterministic.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Sequential,
    #[default]
    Parallel,
}

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FXDA_THREADS";

/// Worker count requested through `FXDA_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = thread_cap() {
            b = b.num_threads(n);
        }
        b.build().expect("rayon pool")
    })
}

#[cfg(not(feature = "parallel"))]
#[allow(dead_code)]
fn pool() -> &'static () {
    static POOL: OnceLock<()> = OnceLock::new();
    POOL.get_or_init(|| ())
}

/// Number of workers `map` will use in parallel mode.
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        pool().current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `items.map(f)` preserving order.
pub fn map<I, O, F>(mode: Mode, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            pool().install(|| items.par_iter().map(&f).collect())
        }
        _ => items.iter().map(f).collect(),
    }
}

/// `(0..n).map(f)` preserving order.
pub fn map_range<O, F>(mode: Mode, n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(mode, &idx, |&i| f(i))
}

/// Fallible variant of [`map`]; the first error in input order wins.
pub fn try_map<I, O, E, F>(mode: Mode, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync + Send,
{
    map(mode, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..100).collect();
        let a = map(Mode::Sequential, &xs, |x| x * x);
        let b = map(Mode::Parallel, &xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
        let r: Result<Vec<u64>, u64> = try_map(Mode::Parallel, &xs, |&x| if x == 3 || x == 9 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(3));
    }
}
