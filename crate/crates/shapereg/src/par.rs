//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the loops below run on rayon;
//! without it they run sequentially. Reductions are computed from partial
//! sums over fixed-size chunks and combined in index order, so the result
//! is bitwise identical regardless of thread count and of whether the
//! `parallel` feature is enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for deterministic reductions.
pub(crate) const CHUNK: usize = 4096;

/// Applies `f(block_index, block)` to consecutive blocks of length `len`.
pub(crate) fn for_each_block_mut<T, F>(data: &mut [T], len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(len > 0 && data.len() % len == 0);
    #[cfg(feature = "parallel")]
    {
        let min = (CHUNK / len).max(1);
        data.par_chunks_mut(len).with_min_len(min).enumerate().for_each(|(i, b)| f(i, b));
    }
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(len).enumerate().for_each(|(i, b)| f(i, b));
}

/// Like [`for_each_block_mut`] but with a parallel-indexed read-only slice.
pub(crate) fn for_each_block_pair<T, U, F>(out: &mut [T], src: &[U], len: usize, f: F)
where
    T: Send,
    U: Sync,
    F: Fn(usize, &mut [T], &[U]) + Sync + Send,
{
    debug_assert!(out.len() == src.len() && len > 0 && out.len() % len == 0);
    #[cfg(feature = "parallel")]
    {
        let min = (CHUNK / len).max(1);
        out.par_chunks_mut(len)
            .zip(src.par_chunks(len))
            .with_min_len(min)
            .enumerate()
            .for_each(|(i, (o, s))| f(i, o, s));
    }
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(len).zip(src.chunks(len)).enumerate().for_each(|(i, (o, s))| f(i, o, s));
}

/// Elementwise map over two slices into an output slice.
pub(crate) fn zip_map_into<F>(a: &[f64], b: &[f64], out: &mut [f64], f: F)
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    debug_assert!(a.len() == b.len() && a.len() == out.len());
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(CHUNK)
        .zip(a.par_chunks(CHUNK).zip(b.par_chunks(CHUNK)))
        .for_each(|(o, (ca, cb))| {
            for k in 0..o.len() {
                o[k] = f(ca[k], cb[k]);
            }
        });
    #[cfg(not(feature = "parallel"))]
    for ((o, &ar), &br) in out.iter_mut().zip(a).zip(b) {
        *o = f(ar, br);
    }
}

fn chunk_sums<F>(len: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    if len == 0 {
        return 0.0;
    }
    let n_chunks = len.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK, ((c + 1) * CHUNK).min(len)))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> =
        (0..n_chunks).map(|c| f(c * CHUNK, ((c + 1) * CHUNK).min(len))).collect();
    partials.iter().sum()
}

/// Deterministic squared Euclidean norm.
pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    chunk_sums(x.len(), |lo, hi| x[lo..hi].iter().map(|v| v * v).sum())
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

/// Deterministic dot product.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    chunk_sums(a.len(), |lo, hi| {
        a[lo..hi].iter().zip(&b[lo..hi]).map(|(x, y)| x * y).sum()
    })
}
