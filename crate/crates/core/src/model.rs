//! Closed-form workspace of every kernel, in counted scalars.
//!
//! These mirror the allocation order of the kernels exactly and are checked
//! against the arena in tests. The benchmark harness uses them to skip
//! configurations that would exceed a workspace budget without running them.

use crate::chunked::{chunk_ranges, ChunkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemShape {
    pub n_q: usize,
    pub n_kv: usize,
    pub heads: usize,
    pub dim: usize,
    pub value_dim: usize,
}

impl ProblemShape {
    /// Self-attention with equal key and value widths.
    pub fn self_attention(n: usize, heads: usize, dim: usize) -> Self {
        Self { n_q: n, n_kv: n, heads, dim, value_dim: dim }
    }
}

pub fn reference_peak(s: &ProblemShape) -> usize {
    s.n_q * s.heads * (s.dim + s.n_kv)
}

pub fn lazy_naive_peak(s: &ProblemShape) -> usize {
    s.dim + s.value_dim + 1
}

pub fn streaming_peak(s: &ProblemShape) -> usize {
    if s.n_q == 0 {
        0
    } else {
        s.dim + s.value_dim + 2
    }
}

pub fn query_chunking_peak(s: &ProblemShape, query_chunk_size: usize) -> usize {
    let rows = query_chunk_size.min(s.n_q);
    rows * s.heads * (s.dim + s.n_kv)
}

/// Peak while summarizing key chunks for `rows` query rows, on top of whatever
/// the caller already holds.
fn summaries_peak(s: &ProblemShape, rows: usize, key_chunk: usize) -> usize {
    let per_summary = rows * s.heads * (s.value_dim + 2);
    chunk_ranges(s.n_kv, key_chunk)
        .enumerate()
        .map(|(c, r)| (c + 1) * per_summary + rows * s.heads * r.len())
        .max()
        .unwrap_or(0)
}

pub fn chunked_peak(s: &ProblemShape, params: &ChunkParams) -> usize {
    let rows = params.query_chunk_size.min(s.n_q);
    if rows == 0 {
        return 0;
    }
    let key_chunk = params.effective_key_chunk(s.n_kv);
    2 * rows * s.heads + rows * s.heads * s.dim + summaries_peak(s, rows, key_chunk)
}

/// Number of live summaries times their size, plus one score block: the
/// leading terms of [`chunked_peak`].
pub fn chunked_leading_terms(s: &ProblemShape, params: &ChunkParams) -> usize {
    let rows = params.query_chunk_size.min(s.n_q);
    let key_chunk = params.effective_key_chunk(s.n_kv);
    s.n_kv.div_ceil(key_chunk) * rows * s.heads * (s.value_dim + 2) + rows * key_chunk * s.heads
}

pub fn reference_backward_peak(s: &ProblemShape) -> usize {
    s.n_q * s.heads * (s.dim + 2 * s.n_kv)
}

pub fn chunked_vjp_peak(s: &ProblemShape, params: &ChunkParams) -> usize {
    let rows = params.query_chunk_size.min(s.n_q);
    if rows == 0 {
        return 0;
    }
    let key_chunk = params.effective_key_chunk(s.n_kv);
    let held = rows * s.heads * (s.value_dim + 2) + rows * s.heads * s.dim;
    let forward = summaries_peak(s, rows, key_chunk);
    let backward = rows * s.heads + 2 * rows * s.heads * key_chunk;
    held + forward.max(backward)
}
