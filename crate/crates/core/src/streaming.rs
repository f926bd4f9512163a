//! Constant-workspace attention.
//!
//! A single query consumes its (key, value) pairs one at a time, keeping only
//! a running max score `m*`, a running sum of `exp(s - m*)`, and the matching
//! exp-weighted value sum. When a new score raises the max, both sums are
//! rescaled by `exp(m_old - m_new)`. Self-attention runs the same loop for
//! each query row in turn.

use crate::error::{AttnError, Result};
use crate::kernels::{dot, scale_into, validate};
use crate::memmeter::WorkspaceArena;
use crate::reference::AttnConfig;
use crate::tensor::{AttnTensor, Element, TensorView};

/// Running accumulator for one (query, head).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState<T> {
    v_star: Vec<T>,
    s_star: T,
    m_star: T,
}

impl<T: Element> SoftmaxState<T> {
    /// Zero sums, running max at `-inf`.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(AttnError::ZeroDim);
        }
        Ok(Self { v_star: vec![T::zero(); dim], s_star: T::zero(), m_star: T::neg_infinity() })
    }

    pub fn dim(&self) -> usize {
        self.v_star.len()
    }

    pub fn v_star(&self) -> &[T] {
        &self.v_star
    }

    pub fn s_star(&self) -> T {
        self.s_star
    }

    pub fn m_star(&self) -> T {
        self.m_star
    }

    /// Scalars held by the state.
    pub fn footprint(&self) -> usize {
        self.v_star.len() + 2
    }

    /// Folds in one scored value.
    ///
    /// On the first update `m*` is `-inf`, so the old-sum factor is
    /// `exp(-inf) = 0` and no `-inf - -inf` ever occurs.
    pub fn update(&mut self, score: T, value: &[T]) -> Result<()> {
        if value.len() != self.v_star.len() {
            return Err(AttnError::DimensionMismatch { expected: self.v_star.len(), got: value.len() });
        }
        if !score.is_finite() {
            return Err(AttnError::NonFiniteScore(score.as_f64()));
        }
        let m_new = self.m_star.max(score);
        let old = (self.m_star - m_new).exp();
        let new = (score - m_new).exp();
        for (acc, &x) in self.v_star.iter_mut().zip(value) {
            *acc = *acc * old + x * new;
        }
        self.s_star = self.s_star * old + new;
        self.m_star = m_new;
        Ok(())
    }

    /// `v* / s*`; an empty stream is an error.
    pub fn finalize(&self) -> Result<Vec<T>> {
        if self.s_star == T::zero() {
            return Err(AttnError::EmptyStream);
        }
        Ok(self.v_star.iter().map(|&x| x / self.s_star).collect())
    }
}

pub fn stream_init<T: Element>(dim: usize) -> Result<SoftmaxState<T>> {
    SoftmaxState::new(dim)
}

/// Attention for one query over a stream of `(key, value)` rows.
///
/// Workspace is the scaled query row plus the accumulator, independent of
/// the stream length.
pub fn single_query_attention<'a, T, I>(
    q_row: &[T],
    pairs: I,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<Vec<T>>
where
    T: Element,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    let dim = q_row.len();
    if dim == 0 {
        return Err(AttnError::ZeroDim);
    }
    let mut pairs = pairs.into_iter().peekable();
    let value_dim = match pairs.peek() {
        Some((_, v)) => v.len(),
        None => return Err(AttnError::EmptyStream),
    };
    let mut qs = arena.scratch::<T>(dim, "stream.scaled_q");
    scale_into(q_row, dim, cfg, &mut qs);
    let mut state = SoftmaxState::new(value_dim)?;
    let _state = arena.reserve(state.footprint(), "stream.state");
    let mut seen = 0u64;
    for (key, value) in pairs {
        if key.len() != dim {
            return Err(AttnError::DimensionMismatch { expected: dim, got: key.len() });
        }
        state.update(dot(&qs, key), value)?;
        seen += 1;
    }
    arena.count_macs(seen * (dim + value_dim) as u64);
    state.finalize()
}

/// Self-attention computed one query row at a time.
pub fn streaming_self_attention<'q, 'k, 'v, T: Element>(
    q: impl Into<TensorView<'q, T>>,
    k: impl Into<TensorView<'k, T>>,
    v: impl Into<TensorView<'v, T>>,
    cfg: &AttnConfig,
    arena: &WorkspaceArena,
) -> Result<AttnTensor<T>> {
    let (q, k, v) = (q.into(), k.into(), v.into());
    let dims = validate(q, k, v)?;
    let mut out = AttnTensor::zeros((dims.n_q, dims.heads, dims.value_dim))?;
    for i in 0..dims.n_q {
        for h in 0..dims.heads {
            let pairs = (0..dims.n_kv).map(|j| (k.row(j, h), v.row(j, h)));
            let row = single_query_attention(q.row(i, h), pairs, cfg, arena)?;
            out.row_mut(i, h).copy_from_slice(&row);
        }
    }
    Ok(out)
}
