//! Gradients of [`chunked_attention`](crate::chunked::chunked_attention)
//! without materializing the attention matrix.
//!
//! The forward pass keeps, per query row and head, only the global max score
//! `m` and the softmax denominator `l` relative to that max. The backward pass
//! walks the same (query block, key block) grid, recomputes each score block,
//! rebuilds the probabilities as `exp(s - m) / l` and accumulates
//!
//! ```text
//! dV[j] += P[i,j] dOut[i]
//! dS[i,j] = P[i,j] (dOut[i].V[j] - delta[i]),   delta[i] = dOut[i].Out[i]
//! dQ[i] += scale dS[i,j] K[j]
//! dK[j] += scale dS[i,j] Q[i]
//! ```
//!
//! `delta[i]` equals `sum_j P[i,j] dP[i,j]`, so it comes from the saved output
//! row instead of a full probability row. The max is treated as a constant;
//! subtracting it does not change the softmax, so its gradient is zero.
//! dK and dV are accumulated over query blocks in sequence order.

use crate::chunked::{attend_scaled, chunk_ranges, validate_chunked, ChunkParams};
use crate::error::{AttnError, Result};
use crate::kernels::{axpy, dot, query_scale, scaled_queries, Dims};
use crate::memmeter::{Scratch, WorkspaceArena};
use crate::reference::{AttnConfig, GradTriple};
use crate::tensor::{AttnTensor, Element, Shape, TensorView};

/// Per-row softmax statistics saved by the forward pass.
///
/// Both buffers are `[n_q, heads]`. Output rows live in the returned output
/// tensor.
#[derive(Debug)]
pub struct BackwardWorkspace<'a, T> {
    row_max: Scratch<'a, T>,
    row_denom: Scratch<'a, T>,
    params: ChunkParams,
    shape: Shape,
}

impl<T: Element> BackwardWorkspace<'_, T> {
    pub fn row_max(&self) -> &[T] {
        &self.row_max
    }

    pub fn row_denom(&self) -> &[T] {
        &self.row_denom
    }

    pub fn params(&self) -> ChunkParams {
        self.params
    }

    /// Scalars held in the arena by this workspace.
    pub fn residual_floats(&self) -> usize {
        self.row_max.len() + self.row_denom.len()
    }

    pub fn query_chunks(&self) -> usize {
        self.shape.seq.div_ceil(self.params.query_chunk_size)
    }
}

/// Forward pass that also returns the statistics needed by
/// [`chunked_attention_backward`]. The output is bit-identical to
/// `chunked_attention` with the same parameters.
pub fn chunked_attention_with_residuals<'a, 'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    params: &ChunkParams,
    cfg: &AttnConfig,
    arena: &'a WorkspaceArena,
) -> Result<(AttnTensor<T>, BackwardWorkspace<'a, T>)> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate_chunked(q, k, v, params)?;
    let key_chunk = params.effective_key_chunk(dims.n_kv);
    let stats = dims.n_q * dims.heads;
    let mut row_max = arena.scratch::<T>(stats, "residual.row_max");
    let mut row_denom = arena.scratch::<T>(stats, "residual.row_denom");
    let mut out = AttnTensor::zeros((dims.n_q, dims.heads, dims.value_dim))?;
    let out_stride = dims.heads * dims.value_dim;
    for range in chunk_ranges(dims.n_q, params.query_chunk_size) {
        let rows = range.len();
        let (lo, hi) = (range.start * dims.heads, range.end * dims.heads);
        let qs = scaled_queries(q.slice_seq(range.clone()), cfg, arena, "chunk.scaled_q");
        attend_scaled(
            &qs,
            rows,
            k,
            v,
            key_chunk,
            arena,
            &mut out.data_mut()[range.start * out_stride..range.end * out_stride],
            &mut row_max[lo..hi],
            &mut row_denom[lo..hi],
        );
    }
    let shape = q.shape();
    Ok((out, BackwardWorkspace { row_max, row_denom, params: *params, shape }))
}

fn check_cotangent<T: Element>(d_out: &AttnTensor<T>, dims: &Dims) -> Result<()> {
    let expected = Shape::new(dims.n_q, dims.heads, dims.value_dim);
    if d_out.shape() != expected {
        return Err(AttnError::ShapeMismatch(format!("output gradient {:?} != output {:?}", d_out.shape(), expected)));
    }
    Ok(())
}

/// Gradient buffers being accumulated.
struct Grads<'g, T> {
    dq_rows: &'g mut [T],
    dk: &'g mut AttnTensor<T>,
    dv: &'g mut AttnTensor<T>,
}

/// Backward sweep of one query block over every key block.
#[allow(clippy::too_many_arguments)]
fn backward_query_chunk<T: Element>(
    qs: &[T],
    d_out_rows: &[T],
    row_max: &[T],
    row_denom: &[T],
    delta: &[T],
    k: TensorView<'_, T>,
    v: TensorView<'_, T>,
    key_chunk: usize,
    scale: T,
    arena: &WorkspaceArena,
    grads: Grads<'_, T>,
) {
    let (heads, dim, value_dim) = (k.heads(), k.dim(), v.dim());
    let rows = row_max.len() / heads;
    let Grads { dq_rows, dk, dv } = grads;
    for range in chunk_ranges(k.seq(), key_chunk) {
        let kb = range.len();
        let k_chunk = k.slice_seq(range.clone());
        let v_chunk = v.slice_seq(range.clone());
        let mut probs = arena.scratch::<T>(rows * heads * kb, "bwd.probs");
        arena.count_score_block();
        for r in 0..rows * heads {
            let h = r % heads;
            let q_row = &qs[r * dim..(r + 1) * dim];
            let (m, l) = (row_max[r], row_denom[r]);
            for (j, p) in probs[r * kb..(r + 1) * kb].iter_mut().enumerate() {
                *p = (dot(q_row, k_chunk.row(j, h)) - m).exp() / l;
            }
        }
        let mut d_scores = arena.scratch::<T>(rows * heads * kb, "bwd.dscores");
        for r in 0..rows * heads {
            let h = r % heads;
            let g = &d_out_rows[r * value_dim..(r + 1) * value_dim];
            let p_row = &probs[r * kb..(r + 1) * kb];
            let ds_row = &mut d_scores[r * kb..(r + 1) * kb];
            for (j, ds) in ds_row.iter_mut().enumerate() {
                *ds = p_row[j] * (dot(g, v_chunk.row(j, h)) - delta[r]);
            }
            let q_row = &qs[r * dim..(r + 1) * dim];
            let dq_row = &mut dq_rows[r * dim..(r + 1) * dim];
            for j in 0..kb {
                axpy(dv.row_mut(range.start + j, h), p_row[j], g);
                axpy(dk.row_mut(range.start + j, h), ds_row[j], q_row);
                axpy(dq_row, ds_row[j] * scale, k_chunk.row(j, h));
            }
        }
        arena.count_macs((rows * heads * kb * (3 * dim + 2 * value_dim)) as u64);
    }
}

/// `delta[r] = dOut[r] . Out[r]`
fn row_deltas<T: Element>(d_out_rows: &[T], out_rows: &[T], value_dim: usize, delta: &mut [T], arena: &WorkspaceArena) {
    for (r, d) in delta.iter_mut().enumerate() {
        let span = r * value_dim..(r + 1) * value_dim;
        *d = dot(&d_out_rows[span.clone()], &out_rows[span]);
    }
    arena.count_macs((delta.len() * value_dim) as u64);
}

/// Backward pass from saved residuals.
#[allow(clippy::too_many_arguments)]
pub fn chunked_attention_backward<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    out: &AttnTensor<T>,
    residuals: &BackwardWorkspace<'_, T>,
    d_out: &AttnTensor<T>,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<GradTriple<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let params = residuals.params;
    let dims = validate_chunked(q, k, v, &params)?;
    check_cotangent(d_out, &dims)?;
    if out.shape() != d_out.shape() || residuals.shape != q.shape() {
        return Err(AttnError::ShapeMismatch("residuals do not match the inputs".into()));
    }
    let key_chunk = params.effective_key_chunk(dims.n_kv);
    let scale: T = query_scale(dims.dim, cfg);
    let heads = dims.heads;
    let out_stride = heads * dims.value_dim;

    let mut dq = AttnTensor::zeros(q.shape())?;
    let mut dk = AttnTensor::zeros(k.shape())?;
    let mut dv = AttnTensor::zeros(v.shape())?;
    for range in chunk_ranges(dims.n_q, params.query_chunk_size) {
        let (lo, hi) = (range.start * heads, range.end * heads);
        let out_span = range.start * out_stride..range.end * out_stride;
        let qs = scaled_queries(q.slice_seq(range.clone()), cfg, arena, "bwd.scaled_q");
        let d_out_rows = &d_out.data()[out_span.clone()];
        let mut delta = arena.scratch::<T>(hi - lo, "bwd.delta");
        row_deltas(d_out_rows, &out.data()[out_span], dims.value_dim, &mut delta, arena);
        let dq_rows = &mut dq.data_mut()[range.start * heads * dims.dim..range.end * heads * dims.dim];
        backward_query_chunk(
            &qs,
            d_out_rows,
            &residuals.row_max[lo..hi],
            &residuals.row_denom[lo..hi],
            &delta,
            k,
            v,
            key_chunk,
            scale,
            arena,
            Grads { dq_rows, dk: &mut dk, dv: &mut dv },
        );
    }
    Ok(GradTriple { dq, dk, dv })
}

/// Vector-Jacobian product of `chunked_attention` with cotangent `d_out`.
///
/// Forward and backward are fused per query block: the block's output rows,
/// max and denominator are the only saved residuals, and they are released
/// before the next block starts. Peak workspace is independent of the number
/// of query blocks.
pub fn chunked_attention_vjp<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    d_out: &AttnTensor<T>,
    params: &ChunkParams,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<GradTriple<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate_chunked(q, k, v, params)?;
    check_cotangent(d_out, &dims)?;
    let key_chunk = params.effective_key_chunk(dims.n_kv);
    let scale: T = query_scale(dims.dim, cfg);
    let heads = dims.heads;
    let out_stride = heads * dims.value_dim;

    let mut dq = AttnTensor::zeros(q.shape())?;
    let mut dk = AttnTensor::zeros(k.shape())?;
    let mut dv = AttnTensor::zeros(v.shape())?;
    for range in chunk_ranges(dims.n_q, params.query_chunk_size) {
        let rows = range.len();
        let stats = rows * heads;
        let mut out_rows = arena.scratch::<T>(rows * out_stride, "residual.out");
        let mut row_max = arena.scratch::<T>(stats, "residual.row_max");
        let mut row_denom = arena.scratch::<T>(stats, "residual.row_denom");
        let qs = scaled_queries(q.slice_seq(range.clone()), cfg, arena, "vjp.scaled_q");
        attend_scaled(&qs, rows, k, v, key_chunk, arena, &mut out_rows, &mut row_max, &mut row_denom);

        let d_out_rows = &d_out.data()[range.start * out_stride..range.end * out_stride];
        let mut delta = arena.scratch::<T>(stats, "bwd.delta");
        row_deltas(d_out_rows, &out_rows, dims.value_dim, &mut delta, arena);
        let dq_rows = &mut dq.data_mut()[range.start * heads * dims.dim..range.end * heads * dims.dim];
        backward_query_chunk(
            &qs,
            d_out_rows,
            &row_max,
            &row_denom,
            &delta,
            k,
            v,
            key_chunk,
            scale,
            arena,
            Grads { dq_rows, dk: &mut dk, dv: &mut dv },
        );
    }
    Ok(GradTriple { dq, dk, dv })
}
