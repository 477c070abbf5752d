//! Fixed-order reductions.
//!
//! Every marker sum in the crate goes through [`chunked_sum`]: terms are added
//! left to right inside chunks of [`CHUNK`] and the chunk partials are added
//! left to right. The association never depends on the thread count, so
//! results are bitwise reproducible.

use std::ops::Add;

pub const CHUNK: usize = 1024;

pub fn chunked_sum<T, F>(n: usize, zero: T, mut term: F) -> T
where
    T: Copy + Add<Output = T>,
    F: FnMut(usize) -> T,
{
    let mut total = zero;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut part = zero;
        for i in start..end {
            part = part + term(i);
        }
        total = total + part;
        start = end;
    }
    total
}

/// [`chunked_sum`] for fallible terms; stops at the first error.
pub fn try_chunked_sum<T, E, F>(n: usize, zero: T, mut term: F) -> Result<T, E>
where
    T: Copy + Add<Output = T>,
    F: FnMut(usize) -> Result<T, E>,
{
    let mut total = zero;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut part = zero;
        for i in start..end {
            part = part + term(i)?;
        }
        total = total + part;
        start = end;
    }
    Ok(total)
}

/// Evaluate `f` for every index in parallel and collect in index order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
