//! Execution-mode switch between the rayon data-parallel path and the
//! sequential fallback.
//!
//! Both paths compute each output element identically, so results are
//! bit-equal regardless of mode. `DSA_LTD_DETERMINISTIC=1` forces the
//! sequential path anyway, as a belt for environments where thread-pool
//! startup itself is unwanted.

/// How batch- and sample-level loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

/// The mode the library uses by default: parallel when the `parallel`
/// feature is enabled and deterministic mode is not forced.
pub fn default_mode() -> ExecMode {
    if std::env::var("DSA_LTD_DETERMINISTIC").as_deref() == Ok("1") {
        return ExecMode::Sequential;
    }
    if cfg!(feature = "parallel") {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Run `f` over `0..n`, filling `out[i]` with `f(i)`. `out.len()` must be `n`.
pub fn for_each_indexed<T, F>(mode: ExecMode, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    match mode {
        ExecMode::Sequential => {
            for (i, slot) in out.iter_mut().enumerate() {
                f(i, slot);
            }
        }
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_iter_mut().enumerate().for_each(|(i, slot)| f(i, slot));
            }
            #[cfg(not(feature = "parallel"))]
            {
                for (i, slot) in out.iter_mut().enumerate() {
                    f(i, slot);
                }
            }
        }
    }
}

/// Map `0..n` to a vector, in parallel when the mode allows it.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let seq = map_indexed(ExecMode::Sequential, 100, |i| (i * i) as f64);
        let par = map_indexed(ExecMode::Parallel, 100, |i| (i * i) as f64);
        assert_eq!(seq, par);
    }

    #[test]
    fn for_each_fills_all_slots() {
        let mut out = vec![0usize; 17];
        for_each_indexed(ExecMode::Parallel, &mut out, |i, slot| *slot = i + 1);
        assert!(out.iter().enumerate().all(|(i, &v)| v == i + 1));
    }
}
