//! Data-parallel map with a sequential fallback.
//!
//! The training and evaluation loops are embarrassingly parallel over samples.
//! With the `parallel` feature (the default) the map runs on rayon; without it
//! the same call compiles to a plain iterator. Results are collected in input
//! order and every reduction afterwards folds sequentially over that order, so
//! the two paths — and any rayon thread count — produce bitwise identical
//! numbers.

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Like [`map_ordered`] but over owned items.
#[cfg(feature = "parallel")]
pub fn map_ordered_owned<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Like [`map_ordered`] but over owned items.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered_owned<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// True when this build actually fans work out to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
