//! Inner loops shared by every attention path.
//!
//! All implementations score a pair with `dot(scaled_query_row, key_row)`, so
//! score values are bit-identical across the reference, streaming and chunked
//! paths for the same inputs.

use crate::error::{AttnError, Result};
use crate::memmeter::{Scratch, WorkspaceArena};
use crate::reference::AttnConfig;
use crate::tensor::{Element, TensorView};

const LANES: usize = 8;

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Element>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x) {
        *a = *a + alpha * *b;
    }
}

/// Multiplier applied to query rows: `1/sqrt(dim)` when scaling is on.
pub(crate) fn query_scale<T: Element>(dim: usize, cfg: &AttnConfig) -> T {
    if cfg.scale_queries {
        T::one() / T::from_f64(dim as f64).sqrt()
    } else {
        T::one()
    }
}

/// Writes `src / sqrt(dim)` (or a plain copy) into `dst`.
pub(crate) fn scale_into<T: Element>(src: &[T], dim: usize, cfg: &AttnConfig, dst: &mut [T]) {
    debug_assert_eq!(src.len(), dst.len());
    if cfg.scale_queries {
        let root = T::from_f64(dim as f64).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *s / root;
        }
    } else {
        dst.copy_from_slice(src);
    }
}

/// Scaled copy of a block of query rows, taken from the arena.
pub(crate) fn scaled_queries<'a, T: Element>(
    q: TensorView<'_, T>,
    cfg: &AttnConfig,
    arena: &'a WorkspaceArena,
    tag: &'static str,
) -> Scratch<'a, T> {
    let mut qs = arena.scratch::<T>(q.data().len(), tag);
    scale_into(q.data(), q.dim(), cfg, &mut qs);
    qs
}

/// Shapes of a validated attention problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub n_q: usize,
    pub n_kv: usize,
    pub heads: usize,
    pub dim: usize,
    pub value_dim: usize,
}

pub(crate) fn validate<T: Element>(q: TensorView<'_, T>, k: TensorView<'_, T>, v: TensorView<'_, T>) -> Result<Dims> {
    if k.seq() != v.seq() {
        return Err(AttnError::ShapeMismatch(format!("{} keys but {} values", k.seq(), v.seq())));
    }
    if q.heads() != k.heads() || k.heads() != v.heads() {
        return Err(AttnError::ShapeMismatch(format!(
            "head counts differ: q={}, k={}, v={}",
            q.heads(),
            k.heads(),
            v.heads()
        )));
    }
    if q.dim() != k.dim() {
        return Err(AttnError::ShapeMismatch(format!("query dim {} != key dim {}", q.dim(), k.dim())));
    }
    if q.dim() == 0 || v.dim() == 0 || q.heads() == 0 {
        return Err(AttnError::ZeroDim);
    }
    if k.seq() == 0 {
        return Err(AttnError::EmptyKeys);
    }
    Ok(Dims { n_q: q.seq(), n_kv: k.seq(), heads: q.heads(), dim: q.dim(), value_dim: v.dim() })
}

/// In-place stable softmax of one score row: subtract the row max, exponentiate,
/// normalize. Returns the max.
pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    m
}
