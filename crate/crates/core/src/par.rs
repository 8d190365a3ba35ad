//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`par_map`] fans out over rayon's
//! pool; without it, it is the same as [`seq_map`]. Both preserve input order,
//! so reductions over their output are deterministic either way.

/// Maps `f` over `items` in order on the calling thread.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    seq_map(items, f)
}

/// Whether [`par_map`] actually runs on a thread pool in this build.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_and_seq_agree_in_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = seq_map(&xs, |x| x * x + 1);
        let b = par_map(&xs, |x| x * x + 1);
        assert_eq!(a, b);
    }
}
