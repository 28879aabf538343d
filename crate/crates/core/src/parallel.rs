//! Thin switch between rayon and sequential iteration.
//!
//! All batch loops in the crate go through [`par_map`] so that the
//! `parallel` feature is the single place deciding whether work is
//! data-parallel. Results are collected in input order, so the two code
//! paths produce identical output (including byte-identical reports).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn par_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}

/// Map over an index range, in parallel when enabled.
pub fn par_map_range<O, F>(range: std::ops::Range<usize>, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    par_map(range.collect::<Vec<_>>(), f)
}
