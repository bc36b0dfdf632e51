//! Data-parallel helpers.
//!
//! The hot loops of the crate (Monte-Carlo rollouts and per-sequence
//! likelihood gradients) go through [`try_map_indexed`]. With the `parallel`
//! feature the work is spread over the rayon pool; without it, or when
//! [`ExecMode::Sequential`] is requested, the same closure runs in a plain
//! loop. Results are always returned in index order so reductions over them
//! are bitwise reproducible regardless of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    /// Falls back to sequential execution when the `parallel` feature is off.
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but short-circuits on the first error (lowest index wins
/// in sequential mode; any failing index in parallel mode).
pub fn try_map_indexed<T, E, F>(n: usize, mode: ExecMode, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let seq = map_indexed(100, ExecMode::Sequential, |i| (i * i) as f64 / 3.0);
        let par = map_indexed(100, ExecMode::Parallel, |i| (i * i) as f64 / 3.0);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49.0 / 3.0);
    }

    #[test]
    fn try_map_propagates_errors() {
        let r: Result<Vec<usize>, String> = try_map_indexed(10, ExecMode::Sequential, |i| {
            if i == 3 {
                Err("boom".to_string())
            } else {
                Ok(i)
            }
        });
        assert_eq!(r.unwrap_err(), "boom");
    }
}
