//! Ground-truth attention.
//!
//! [`reference_attention`] is the textbook stable form and materializes the
//! full score matrix, which makes it the memory baseline.
//! [`naive_lazy_attention`] defers the softmax denominator to one final
//! division and never subtracts a max; it overflows once scores pass the
//! dtype's `exp` limit and is kept as a negative control.
//! [`reference_backward`] is the analytic vector-Jacobian product.

use crate::error::{AttnError, Result};
use crate::kernels::{axpy, dot, query_scale, scaled_queries, softmax_in_place, validate};
use crate::memmeter::WorkspaceArena;
use crate::tensor::{AttnTensor, Element, Shape, TensorView};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    /// Divide queries by `sqrt(dim)` before scoring.
    pub scale_queries: bool,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self { scale_queries: true }
    }
}

impl AttnConfig {
    pub fn unscaled() -> Self {
        Self { scale_queries: false }
    }
}

/// Gradients with respect to queries, keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTriple<T> {
    pub dq: AttnTensor<T>,
    pub dk: AttnTensor<T>,
    pub dv: AttnTensor<T>,
}

/// Fills `probs` (`[n_q, heads, n_kv]`) with normalized attention weights.
fn dense_weights<T: Element>(qs: &[T], k: TensorView<'_, T>, n_q: usize, probs: &mut [T], arena: &WorkspaceArena) {
    let (heads, dim, n_kv) = (k.heads(), k.dim(), k.seq());
    arena.count_score_block();
    for i in 0..n_q {
        for h in 0..heads {
            let r = i * heads + h;
            let q_row = &qs[r * dim..(r + 1) * dim];
            let row = &mut probs[r * n_kv..(r + 1) * n_kv];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q_row, k.row(j, h));
            }
            softmax_in_place(row);
        }
    }
    arena.count_macs((n_q * heads * n_kv * dim) as u64);
}

/// Standard softmax attention over the whole score matrix.
pub fn reference_attention<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<AttnTensor<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate(q, k, v)?;
    let qs = scaled_queries(q, cfg, arena, "reference.scaled_q");
    let mut probs = arena.scratch::<T>(dims.n_q * dims.heads * dims.n_kv, "reference.scores");
    dense_weights(&qs, k, dims.n_q, &mut probs, arena);

    let mut out = AttnTensor::zeros((dims.n_q, dims.heads, dims.value_dim))?;
    for i in 0..dims.n_q {
        for h in 0..dims.heads {
            let r = i * dims.heads + h;
            let weights = &probs[r * dims.n_kv..(r + 1) * dims.n_kv];
            let out_row = out.row_mut(i, h);
            for (j, &w) in weights.iter().enumerate() {
                axpy(out_row, w, v.row(j, h));
            }
        }
    }
    arena.count_macs((dims.n_q * dims.heads * dims.n_kv * dims.value_dim) as u64);
    Ok(out)
}

/// Dense `[n_q, heads, n_kv]` softmax weights used by [`reference_attention`].
///
/// Test hook; the workspace it uses is not reported.
pub fn softmax_weights<'q, 'k, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    cfg: &AttnConfig,
) -> Result<AttnTensor<T>> {
    let (q, k) = (q.into(), k.into());
    validate(q, k, k)?;
    let arena = WorkspaceArena::new();
    let qs = scaled_queries(q, cfg, &arena, "weights.scaled_q");
    let mut probs = AttnTensor::zeros((q.seq(), q.heads(), k.seq()))?;
    dense_weights(&qs, k, q.seq(), probs.data_mut(), &arena);
    Ok(probs)
}

/// `sum_i v_i e^{s_i} / sum_j e^{s_j}` without max subtraction.
///
/// Non-finite results are returned as is.
pub fn naive_lazy_attention<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<AttnTensor<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate(q, k, v)?;
    let mut out = AttnTensor::zeros((dims.n_q, dims.heads, dims.value_dim))?;
    let mut q_row = arena.scratch::<T>(dims.dim, "lazy.scaled_q");
    let mut acc = arena.scratch::<T>(dims.value_dim, "lazy.v_star");
    let _sum = arena.reserve(1, "lazy.s_star");
    for i in 0..dims.n_q {
        for h in 0..dims.heads {
            crate::kernels::scale_into(q.row(i, h), dims.dim, cfg, &mut q_row);
            acc.fill(T::zero());
            let mut denom = T::zero();
            for j in 0..dims.n_kv {
                let w = dot(&q_row, k.row(j, h)).exp();
                axpy(&mut acc, w, v.row(j, h));
                denom = denom + w;
            }
            for (o, a) in out.row_mut(i, h).iter_mut().zip(acc.iter()) {
                *o = *a / denom;
            }
        }
    }
    arena.count_macs((dims.n_q * dims.heads * dims.n_kv * (dims.dim + dims.value_dim)) as u64);
    Ok(out)
}

/// Analytic backward pass of [`reference_attention`].
///
/// Per head, with `P = softmax(scale * Q K^T)`:
/// `dV = P^T dOut`, `dP = dOut V^T`,
/// `dS[i,j] = P[i,j] (dP[i,j] - sum_l P[i,l] dP[i,l])`,
/// `dQ = scale * dS K`, `dK = scale * dS^T Q`.
pub fn reference_backward<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    d_out: &AttnTensor<T>,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<GradTriple<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate(q, k, v)?;
    let out_shape = Shape::new(dims.n_q, dims.heads, dims.value_dim);
    if d_out.shape() != out_shape {
        return Err(AttnError::ShapeMismatch(format!("output gradient {:?} != output {:?}", d_out.shape(), out_shape)));
    }
    let (heads, n_kv) = (dims.heads, dims.n_kv);
    let scale: T = query_scale(dims.dim, cfg);

    let qs = scaled_queries(q, cfg, arena, "reference_bwd.scaled_q");
    let mut probs = arena.scratch::<T>(dims.n_q * heads * n_kv, "reference_bwd.probs");
    dense_weights(&qs, k, dims.n_q, &mut probs, arena);
    let mut d_scores = arena.scratch::<T>(dims.n_q * heads * n_kv, "reference_bwd.dscores");

    let mut dq = AttnTensor::zeros(q.shape())?;
    let mut dk = AttnTensor::zeros(k.shape())?;
    let mut dv = AttnTensor::zeros(v.shape())?;

    for i in 0..dims.n_q {
        for h in 0..heads {
            let r = i * heads + h;
            let p_row = &probs[r * n_kv..(r + 1) * n_kv];
            let ds_row = &mut d_scores[r * n_kv..(r + 1) * n_kv];
            let g = d_out.row(i, h);
            for (j, dp) in ds_row.iter_mut().enumerate() {
                *dp = dot(g, v.row(j, h));
            }
            let row_dot = p_row.iter().zip(ds_row.iter()).fold(T::zero(), |acc, (&p, &dp)| acc + p * dp);
            for (ds, &p) in ds_row.iter_mut().zip(p_row) {
                *ds = p * (*ds - row_dot);
            }
            for j in 0..n_kv {
                axpy(dv.row_mut(j, h), p_row[j], g);
                axpy(dk.row_mut(j, h), ds_row[j], &qs[r * dims.dim..(r + 1) * dims.dim]);
            }
            let dq_row = dq.row_mut(i, h);
            for (j, &ds) in ds_row.iter().enumerate() {
                axpy(dq_row, ds, k.row(j, h));
            }
            for x in dq_row.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    arena.count_macs((dims.n_q * heads * n_kv * (2 * dims.dim + 2 * dims.value_dim)) as u64);
    Ok(GradTriple { dq, dk, dv })
}
