//! Chunked attention with `O(sqrt n)` workspace.
//!
//! Queries are processed in blocks of `query_chunk_size`. For each block the
//! keys and values are cut into blocks of `key_chunk_size`, and every key
//! block is reduced to a [`ChunkSummary`]: the exp-weighted value sum, the
//! exp-weight sum and the per-row max, all relative to that block's own max.
//! Once every key block is summarized, each summary is rescaled by
//! `exp(chunk_max - global_max)`, the summaries are summed in block order,
//! and the values are divided by the weights. With `key_chunk_size = sqrt(n)`
//! there are `sqrt(n)` live summaries per query block.
//!
//! Final chunks may be shorter than the chunk size.

use crate::error::{AttnError, Result};
use crate::kernels::{axpy, dot, scaled_queries, softmax_in_place, validate, Dims};
use crate::memmeter::{Scratch, WorkspaceArena};
use crate::reference::AttnConfig;
use crate::tensor::{AttnTensor, Element, TensorView};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkParams {
    pub query_chunk_size: usize,
    pub key_chunk_size: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self { query_chunk_size: 1024, key_chunk_size: 4096 }
    }
}

impl ChunkParams {
    pub fn new(query_chunk_size: usize, key_chunk_size: usize) -> Result<Self> {
        let p = Self { query_chunk_size, key_chunk_size };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_chunk_size == 0 || self.key_chunk_size == 0 {
            return Err(AttnError::InvalidChunkSize);
        }
        Ok(())
    }

    /// Key chunk actually used for `n_kv` keys.
    pub fn effective_key_chunk(&self, n_kv: usize) -> usize {
        self.key_chunk_size.min(n_kv).max(1)
    }
}

/// Half-open ranges `[start, end)` covering `0..len` in steps of `chunk`.
pub(crate) fn chunk_ranges(len: usize, chunk: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len).step_by(chunk.max(1)).map(move |start| start..(start + chunk).min(len))
}

/// Partial attention state of one key chunk for a block of query rows.
///
/// `exp_values` is `[rows, heads, value_dim]`; the other two are `[rows, heads]`.
#[derive(Debug)]
pub struct ChunkSummary<'a, T> {
    rows: usize,
    heads: usize,
    value_dim: usize,
    exp_values: Scratch<'a, T>,
    exp_weight_sum: Scratch<'a, T>,
    max_score: Scratch<'a, T>,
}

impl<T: Element> ChunkSummary<'_, T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn exp_values(&self) -> &[T] {
        &self.exp_values
    }

    pub fn exp_values_row(&self, i: usize, h: usize) -> &[T] {
        let r = i * self.heads + h;
        &self.exp_values[r * self.value_dim..(r + 1) * self.value_dim]
    }

    pub fn exp_weight_sum(&self) -> &[T] {
        &self.exp_weight_sum
    }

    pub fn max_score(&self) -> &[T] {
        &self.max_score
    }
}

/// Summary of one key chunk against already-scaled query rows `qs`.
pub(crate) fn summarize_scaled<'a, T: Element>(
    qs: &[T],
    rows: usize,
    k_chunk: TensorView<'_, T>,
    v_chunk: TensorView<'_, T>,
    arena: &'a WorkspaceArena,
) -> ChunkSummary<'a, T> {
    let (heads, dim, value_dim, kb) = (k_chunk.heads(), k_chunk.dim(), v_chunk.dim(), k_chunk.seq());
    let mut scores = arena.scratch::<T>(rows * heads * kb, "chunk.scores");
    arena.count_score_block();
    for r in 0..rows * heads {
        let h = r % heads;
        let q_row = &qs[r * dim..(r + 1) * dim];
        for (j, s) in scores[r * kb..(r + 1) * kb].iter_mut().enumerate() {
            *s = dot(q_row, k_chunk.row(j, h));
        }
    }

    let mut exp_values = arena.scratch::<T>(rows * heads * value_dim, "chunk.exp_values");
    let mut exp_weight_sum = arena.scratch::<T>(rows * heads, "chunk.exp_weight_sum");
    let mut max_score = arena.scratch::<T>(rows * heads, "chunk.max_score");
    for r in 0..rows * heads {
        let h = r % heads;
        let row = &mut scores[r * kb..(r + 1) * kb];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum = sum + *x;
        }
        let acc = &mut exp_values[r * value_dim..(r + 1) * value_dim];
        for (j, &w) in row.iter().enumerate() {
            axpy(acc, w, v_chunk.row(j, h));
        }
        exp_weight_sum[r] = sum;
        max_score[r] = m;
    }
    arena.count_macs((rows * heads * kb * (dim + value_dim)) as u64);
    ChunkSummary { rows, heads, value_dim, exp_values, exp_weight_sum, max_score }
}

/// Summarizes one key chunk for a block of query rows.
pub fn summarize_chunk<'a, 'q, 'k, 'v, T: Element>(
    q_chunk: impl Into<TensorView<'q, T>>,
    k_chunk: impl Into<TensorView<'k, T>>,
    v_chunk: impl Into<TensorView<'v, T>>,
    cfg: &AttnConfig,
    arena: &'a WorkspaceArena,
) -> Result<ChunkSummary<'a, T>> {
    let (q, k, v) = (q_chunk.into(), k_chunk.into(), v_chunk.into());
    validate(q, k, v)?;
    let qs = scaled_queries(q, cfg, arena, "chunk.scaled_q");
    Ok(summarize_scaled(&qs, q.seq(), k, v, arena))
}

/// Rescales every summary to the per-row global max and combines them.
///
/// Writes normalized outputs to `out`, the global max to `row_max` and the
/// combined denominator (relative to that max) to `row_denom`.
pub(crate) fn combine_summaries<T: Element>(
    summaries: &[ChunkSummary<'_, T>],
    value_dim: usize,
    out: &mut [T],
    row_max: &mut [T],
    row_denom: &mut [T],
) {
    for r in 0..row_max.len() {
        let global_max = summaries.iter().fold(T::neg_infinity(), |a, s| a.max(s.max_score[r]));
        let out_row = &mut out[r * value_dim..(r + 1) * value_dim];
        out_row.fill(T::zero());
        let mut weight = T::zero();
        for s in summaries {
            let factor = (s.max_score[r] - global_max).exp();
            axpy(out_row, factor, &s.exp_values[r * value_dim..(r + 1) * value_dim]);
            weight = weight + factor * s.exp_weight_sum[r];
        }
        for x in out_row.iter_mut() {
            *x = *x / weight;
        }
        row_max[r] = global_max;
        row_denom[r] = weight;
    }
}

/// Attention of scaled query rows over all keys, one key chunk at a time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_scaled<T: Element>(
    qs: &[T],
    rows: usize,
    k: TensorView<'_, T>,
    v: TensorView<'_, T>,
    key_chunk: usize,
    arena: &WorkspaceArena,
    out: &mut [T],
    row_max: &mut [T],
    row_denom: &mut [T],
) {
    let summaries: Vec<_> = chunk_ranges(k.seq(), key_chunk)
        .map(|range| summarize_scaled(qs, rows, k.slice_seq(range.clone()), v.slice_seq(range), arena))
        .collect();
    combine_summaries(&summaries, v.dim(), out, row_max, row_denom);
}

/// Scales one query block and attends over all keys, writing into `out`.
fn run_query_chunk<T: Element>(
    q_chunk: TensorView<'_, T>,
    k: TensorView<'_, T>,
    v: TensorView<'_, T>,
    key_chunk: usize,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
    out: &mut [T],
) {
    let stats = q_chunk.seq() * q_chunk.heads();
    let mut row_max = arena.scratch::<T>(stats, "chunk.row_max");
    let mut row_denom = arena.scratch::<T>(stats, "chunk.row_denom");
    let qs = scaled_queries(q_chunk, cfg, arena, "chunk.scaled_q");
    attend_scaled(&qs, q_chunk.seq(), k, v, key_chunk, arena, out, &mut row_max, &mut row_denom);
}

/// Attention for one block of queries over all keys.
pub fn query_chunk_attention<'q, 'k, 'v, T: Element>(
    q_chunk: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    params: &ChunkParams,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<AttnTensor<T>> {
    let (q, k, v) = (q_chunk.into(), k.into(), v.into());
    let dims = validate(q, k, v)?;
    params.validate()?;
    let mut out = AttnTensor::zeros((dims.n_q, dims.heads, dims.value_dim))?;
    run_query_chunk(q, k, v, params.effective_key_chunk(dims.n_kv), cfg, arena, out.data_mut());
    Ok(out)
}

pub(crate) fn validate_chunked<T: Element>(
    q: TensorView<'_, T>,
    k: TensorView<'_, T>,
    v: TensorView<'_, T>,
    params: &ChunkParams,
) -> Result<Dims> {
    let dims = validate(q, k, v)?;
    params.validate()?;
    Ok(dims)
}

/// Memory-efficient multi-head attention.
///
/// Each query block's result goes straight into the output tensor, so no
/// workspace carries over between query blocks.
pub fn chunked_attention<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    params: &ChunkParams,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<AttnTensor<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate_chunked(q, k, v, params)?;
    let key_chunk = params.effective_key_chunk(dims.n_kv);
    let mut out = AttnTensor::zeros((dims.n_q, dims.heads, dims.value_dim))?;
    let out_stride = dims.heads * dims.value_dim;
    for range in chunk_ranges(dims.n_q, params.query_chunk_size) {
        let out_rows = &mut out.data_mut()[range.start * out_stride..range.end * out_stride];
        run_query_chunk(q.slice_seq(range), k, v, key_chunk, cfg, arena, out_rows);
    }
    Ok(out)
}

/// Query blocking only: each block takes a full-width stable softmax over
/// every key.
pub fn query_chunking_only<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    query_chunk_size: usize,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<AttnTensor<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate(q, k, v)?;
    if query_chunk_size == 0 {
        return Err(AttnError::InvalidChunkSize);
    }
    let (heads, n_kv, dim, value_dim) = (dims.heads, dims.n_kv, dims.dim, dims.value_dim);
    let mut out = AttnTensor::zeros((dims.n_q, heads, value_dim))?;
    for range in chunk_ranges(dims.n_q, query_chunk_size) {
        let rows = range.len();
        let first = range.start;
        let qs = scaled_queries(q.slice_seq(range), cfg, arena, "qchunk.scaled_q");
        let mut probs = arena.scratch::<T>(rows * heads * n_kv, "qchunk.scores");
        arena.count_score_block();
        for r in 0..rows * heads {
            let h = r % heads;
            let q_row = &qs[r * dim..(r + 1) * dim];
            let row = &mut probs[r * n_kv..(r + 1) * n_kv];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q_row, k.row(j, h));
            }
            softmax_in_place(row);
            let out_row = out.row_mut(first + r / heads, h);
            for (j, &w) in row.iter().enumerate() {
                axpy(out_row, w, v.row(j, h));
            }
        }
        arena.count_macs((rows * heads * n_kv * (dim + value_dim)) as u64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memmeter::measure;
    use crate::reference::reference_attention;
    use crate::streaming::streaming_self_attention;
    use crate::tensor::max_abs_diff;

    fn rand(shape: (usize, usize, usize), seed: u64) -> AttnTensor<f64> {
        AttnTensor::random_normal(shape, seed, 1.0).unwrap()
    }

    #[test]
    fn chunk_ranges_are_ragged() {
        let r: Vec<_> = chunk_ranges(10, 4).collect();
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert_eq!(chunk_ranges(0, 4).count(), 0);
        assert_eq!(chunk_ranges(3, 7).collect::<Vec<_>>(), vec![0..3]);
    }

    #[test]
    fn params_reject_zero() {
        assert!(ChunkParams::new(0, 4).is_err());
        assert!(ChunkParams::new(4, 0).is_err());
        let p = ChunkParams::default();
        assert_eq!((p.query_chunk_size, p.key_chunk_size), (1024, 4096));
        assert_eq!(p.effective_key_chunk(100), 100);
    }

    #[test]
    fn singleton_key_chunk_summary() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((3, 2, 4), 1);
        let k = rand((1, 2, 4), 2);
        let v = rand((1, 2, 4), 3);
        let s = summarize_chunk(&q, &k, &v, &cfg, &arena).unwrap();
        assert!(s.exp_weight_sum().iter().all(|&w| w == 1.0));
        for i in 0..3 {
            for h in 0..2 {
                assert_eq!(s.exp_values_row(i, h), v.row(0, h));
                let score: f64 = q.row(i, h).iter().zip(k.row(0, h)).map(|(a, b)| a / 2.0 * b).sum();
                assert!((s.max_score()[i * 2 + h] - score).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_summary() {
        let arena = WorkspaceArena::new();
        let q = AttnTensor::<f64>::zeros((2, 1, 3)).unwrap();
        let k = rand((5, 1, 3), 2);
        let v = rand((5, 1, 3), 3);
        let s = summarize_chunk(&q, &k, &v, &AttnConfig::default(), &arena).unwrap();
        for i in 0..2 {
            assert_eq!(s.max_score()[i], 0.0);
            assert_eq!(s.exp_weight_sum()[i], 5.0);
            for c in 0..3 {
                let col: f64 = (0..5).map(|j| v.get(j, 0, c)).sum();
                assert!((s.exp_values_row(i, 0)[c] - col).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn summary_recombines_to_restricted_reference() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((6, 2, 8), 4);
        let k = rand((9, 2, 8), 5);
        let v = rand((9, 2, 8), 6);
        let expect = reference_attention(&q, &k, &v, &cfg, &arena).unwrap();
        let s = summarize_chunk(&q, &k, &v, &cfg, &arena).unwrap();
        for i in 0..6 {
            for h in 0..2 {
                let w = s.exp_weight_sum()[i * 2 + h];
                for (c, x) in s.exp_values_row(i, h).iter().enumerate() {
                    assert!((x / w - expect.get(i, h, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn summarize_rejects_empty_chunk() {
        let arena = WorkspaceArena::new();
        let q = rand((2, 1, 3), 1);
        let k = AttnTensor::<f64>::zeros((0, 1, 3)).unwrap();
        assert!(matches!(summarize_chunk(&q, &k, &k, &AttnConfig::default(), &arena), Err(AttnError::EmptyKeys)));
    }

    #[test]
    fn single_key_chunk_matches_reference() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((16, 2, 8), 7);
        let k = rand((40, 2, 8), 8);
        let v = rand((40, 2, 8), 9);
        let got = query_chunk_attention(&q, &k, &v, &ChunkParams::default(), &cfg, &arena).unwrap();
        let expect = reference_attention(&q, &k, &v, &cfg, &arena).unwrap();
        assert!(max_abs_diff(&got, &expect).unwrap() < 1e-12);
    }

    #[test]
    fn key_chunk_size_invariance() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let n = 100;
        let q = rand((12, 2, 8), 10);
        let k = rand((n, 2, 8), 11);
        let v = rand((n, 2, 8), 12);
        let base = query_chunk_attention(&q, &k, &v, &ChunkParams::new(12, n).unwrap(), &cfg, &arena).unwrap();
        for kc in [1, 7, 64, n] {
            let got = query_chunk_attention(&q, &k, &v, &ChunkParams::new(12, kc).unwrap(), &cfg, &arena).unwrap();
            assert!(max_abs_diff(&got, &base).unwrap() < 1e-10, "kc={kc}");
        }
    }

    #[test]
    fn degenerate_chunking_matches_reference() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((50, 3, 4), 1);
        let k = rand((50, 3, 4), 2);
        let v = rand((50, 3, 4), 3);
        let got = chunked_attention(&q, &k, &v, &ChunkParams::new(50, 50).unwrap(), &cfg, &arena).unwrap();
        let expect = reference_attention(&q, &k, &v, &cfg, &arena).unwrap();
        assert!(max_abs_diff(&got, &expect).unwrap() < 1e-12);
    }

    #[test]
    fn chunked_matches_streaming() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((512, 1, 16), 21);
        let k = rand((512, 1, 16), 22);
        let v = rand((512, 1, 16), 23);
        let got = chunked_attention(&q, &k, &v, &ChunkParams::new(100, 23).unwrap(), &cfg, &arena).unwrap();
        let expect = streaming_self_attention(&q, &k, &v, &cfg, &arena).unwrap();
        assert!(max_abs_diff(&got, &expect).unwrap() < 1e-10);
    }

    #[test]
    fn query_chunking_full_width_matches_reference() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((64, 2, 8), 31);
        let k = rand((64, 2, 8), 32);
        let v = rand((64, 2, 8), 33);
        let expect = reference_attention(&q, &k, &v, &cfg, &arena).unwrap();
        let got = query_chunking_only(&q, &k, &v, 64, &cfg, &arena).unwrap();
        assert!(max_abs_diff(&got, &expect).unwrap() < 1e-12);
        assert!(query_chunking_only(&q, &k, &v, 0, &cfg, &arena).is_err());
    }

    #[test]
    fn query_chunking_matches_chunked() {
        let arena = WorkspaceArena::new();
        let cfg = AttnConfig::default();
        let q = rand((512, 1, 8), 41);
        let k = rand((512, 1, 8), 42);
        let v = rand((512, 1, 8), 43);
        let a = query_chunking_only(&q, &k, &v, 37, &cfg, &arena).unwrap();
        let b = chunked_attention(&q, &k, &v, &ChunkParams::new(64, 22).unwrap(), &cfg, &arena).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() < 1e-10);
    }

    #[test]
    fn no_workspace_leaks() {
        let cfg = AttnConfig::default();
        let q = rand((33, 2, 4), 1);
        let (_, report) =
            measure(|arena| chunked_attention(&q, &q, &q, &ChunkParams::new(8, 5).unwrap(), &cfg, arena).unwrap())
                .unwrap();
        assert!(report.peak_floats > 0);
    }
}
