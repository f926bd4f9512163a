//! Dense `[seq, heads, dim]` tensors.
//!
//! Element `(i, h, j)` lives at flat index `(i * heads + h) * dim + j`, so a
//! contiguous range of sequence positions is a contiguous slice of `data`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use num_traits::Float;

use crate::error::{AttnError, Result};
use crate::rng::NormalStream;

/// Scalar dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Largest argument whose exponential is still finite, `ln(MAX)`.
    pub fn overflow_threshold(self) -> f64 {
        match self {
            Dtype::F32 => (f32::MAX as f64).ln(),
            Dtype::F64 => f64::MAX.ln(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Real scalar types the kernels are generic over.
pub trait Element: Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
}

impl Shape {
    pub const fn new(seq: usize, heads: usize, dim: usize) -> Self {
        Self { seq, heads, dim }
    }

    /// Flat element count, or `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        self.seq.checked_mul(self.heads)?.checked_mul(self.dim)
    }

    /// Elements per sequence position.
    pub fn row_stride(&self) -> usize {
        self.heads * self.dim
    }

    #[inline]
    pub fn index(&self, i: usize, h: usize, j: usize) -> usize {
        (i * self.heads + h) * self.dim + j
    }
}

impl From<(usize, usize, usize)> for Shape {
    fn from((seq, heads, dim): (usize, usize, usize)) -> Self {
        Self::new(seq, heads, dim)
    }
}

/// Owned dense tensor.
#[derive(Clone, PartialEq)]
pub struct AttnTensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for AttnTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttnTensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl<T: Element> AttnTensor<T> {
    /// Tensor with every element equal to `fill`.
    pub fn new(shape: impl Into<Shape>, fill: T) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_len().ok_or(AttnError::SizeOverflow(shape))?;
        Ok(Self { shape, data: vec![fill; len] })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_len().ok_or(AttnError::SizeOverflow(shape))?;
        if len != data.len() {
            return Err(AttnError::DataLength { shape, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    /// Deterministic `N(0, std^2)` samples; see [`crate::rng`] for the generator.
    pub fn random_normal(shape: impl Into<Shape>, seed: u64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(AttnError::InvalidStd(std));
        }
        let shape = shape.into();
        let len = shape.checked_len().ok_or(AttnError::SizeOverflow(shape))?;
        let stream = NormalStream::new(seed);
        let data = (0..len as u64).map(|i| T::from_f64(std * stream.normal(i))).collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, h: usize, j: usize) -> T {
        self.data[self.shape.index(i, h, j)]
    }

    pub fn set(&mut self, i: usize, h: usize, j: usize, value: T) {
        let idx = self.shape.index(i, h, j);
        self.data[idx] = value;
    }

    /// The `dim`-vector at `(i, h)`.
    pub fn row(&self, i: usize, h: usize) -> &[T] {
        let start = self.shape.index(i, h, 0);
        &self.data[start..start + self.shape.dim]
    }

    pub fn row_mut(&mut self, i: usize, h: usize) -> &mut [T] {
        let start = self.shape.index(i, h, 0);
        let dim = self.shape.dim;
        &mut self.data[start..start + dim]
    }

    pub fn view(&self) -> TensorView<'_, T> {
        TensorView { shape: self.shape, data: &self.data }
    }

    /// Sequence positions `range` as a view.
    pub fn slice_seq(&self, range: Range<usize>) -> TensorView<'_, T> {
        self.view().slice_seq(range)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same data converted to another scalar type.
    pub fn cast<U: Element>(&self) -> AttnTensor<U> {
        AttnTensor { shape: self.shape, data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect() }
    }
}

/// Borrowed tensor, typically a contiguous range of sequence positions.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a, T> {
    shape: Shape,
    data: &'a [T],
}

impl<'a, T: Element> TensorView<'a, T> {
    pub fn new(shape: Shape, data: &'a [T]) -> Result<Self> {
        let len = shape.checked_len().ok_or(AttnError::SizeOverflow(shape))?;
        if len != data.len() {
            return Err(AttnError::DataLength { shape, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn seq(&self) -> usize {
        self.shape.seq
    }

    pub fn heads(&self) -> usize {
        self.shape.heads
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn data(&self) -> &'a [T] {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize, h: usize) -> &'a [T] {
        let start = self.shape.index(i, h, 0);
        &self.data[start..start + self.shape.dim]
    }

    /// Panics if `range` is out of bounds.
    pub fn slice_seq(&self, range: Range<usize>) -> TensorView<'a, T> {
        assert!(range.start <= range.end && range.end <= self.shape.seq, "seq slice out of bounds");
        let stride = self.shape.row_stride();
        TensorView {
            shape: Shape::new(range.end - range.start, self.shape.heads, self.shape.dim),
            data: &self.data[range.start * stride..range.end * stride],
        }
    }

    pub fn to_tensor(&self) -> AttnTensor<T> {
        AttnTensor { shape: self.shape, data: self.data.to_vec() }
    }
}

impl<'a, T: Element> From<&'a AttnTensor<T>> for TensorView<'a, T> {
    fn from(t: &'a AttnTensor<T>) -> Self {
        t.view()
    }
}

/// Largest elementwise absolute difference, computed in f64.
pub fn max_abs_diff<T: Element>(a: &AttnTensor<T>, b: &AttnTensor<T>) -> Result<f64> {
    if a.shape != b.shape {
        return Err(AttnError::ShapeMismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(max_abs_diff_slices(&a.data, &b.data))
}

/// NaN anywhere yields NaN.
pub(crate) fn max_abs_diff_slices<T: Element>(a: &[T], b: &[T]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (x.as_f64() - y.as_f64()).abs();
        if d.is_nan() {
            return f64::NAN;
        }
        worst = worst.max(d);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_constructor() {
        let t = AttnTensor::<f64>::new((2, 1, 3), 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let t = AttnTensor::<f64>::new((1, 2, 2), 7.5).unwrap();
        assert_eq!(t.data(), &[7.5; 4]);
    }

    #[test]
    fn empty_shape() {
        let t = AttnTensor::<f32>::new((0, 1, 4), 1.0).unwrap();
        assert_eq!(t.len(), 0);
        assert!(t.is_empty());
    }

    #[test]
    fn size_overflow_is_an_error() {
        let err = AttnTensor::<f32>::new((usize::MAX, 2, 2), 0.0).unwrap_err();
        assert!(matches!(err, AttnError::SizeOverflow(_)));
    }

    #[test]
    fn row_major_layout() {
        let mut t = AttnTensor::<f64>::zeros((3, 2, 4)).unwrap();
        t.set(2, 1, 3, 5.0);
        assert_eq!(t.data()[(2 * 2 + 1) * 4 + 3], 5.0);
        assert_eq!(t.get(2, 1, 3), 5.0);
        assert_eq!(t.row(2, 1)[3], 5.0);
        assert_eq!(t.slice_seq(2..3).row(0, 1)[3], 5.0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(AttnTensor::from_vec((2, 1, 2), vec![1.0f64; 3]).is_err());
        assert!(AttnTensor::from_vec((2, 1, 2), vec![1.0f64; 4]).is_ok());
    }

    #[test]
    fn random_normal_is_deterministic() {
        let a = AttnTensor::<f32>::random_normal((5, 2, 3), 11, 1.0).unwrap();
        let b = AttnTensor::<f32>::random_normal((5, 2, 3), 11, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        let c = AttnTensor::<f32>::random_normal((5, 2, 3), 12, 1.0).unwrap();
        assert!(max_abs_diff(&a, &c).unwrap() > 0.0);
    }

    #[test]
    fn random_normal_moments() {
        let t = AttnTensor::<f64>::random_normal((4096, 1, 64), 42, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn random_normal_rejects_nonpositive_std() {
        assert!(AttnTensor::<f64>::random_normal((1, 1, 1), 0, 0.0).is_err());
        assert!(AttnTensor::<f64>::random_normal((1, 1, 1), 0, -1.0).is_err());
    }

    #[test]
    fn max_abs_diff_cases() {
        let a = AttnTensor::from_vec((1, 1, 2), vec![1.0f64, 2.0]).unwrap();
        let b = AttnTensor::from_vec((1, 1, 2), vec![1.0f64, 5.0]).unwrap();
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 3.0);
        let c = AttnTensor::from_vec((2, 1, 1), vec![1.0f64, 5.0]).unwrap();
        assert!(matches!(max_abs_diff(&a, &c), Err(AttnError::ShapeMismatch(_))));
    }

    #[test]
    fn max_abs_diff_matches_scan() {
        let a = AttnTensor::<f64>::random_normal((17, 3, 5), 1, 1.0).unwrap();
        let b = AttnTensor::<f64>::random_normal((17, 3, 5), 2, 1.0).unwrap();
        let mut scan = 0.0f64;
        for i in 0..17 {
            for h in 0..3 {
                for j in 0..5 {
                    let d = (a.get(i, h, j) - b.get(i, h, j)).abs();
                    if d > scan {
                        scan = d;
                    }
                }
            }
        }
        assert_eq!(max_abs_diff(&a, &b).unwrap(), scan);
    }

    #[test]
    fn overflow_thresholds() {
        for dtype in [Dtype::F32, Dtype::F64] {
            let t = dtype.overflow_threshold();
            match dtype {
                Dtype::F32 => {
                    assert!((t - 88.72).abs() < 0.01);
                    assert!(((t + 1.0) as f32).exp().is_infinite());
                    assert!(((t - 0.01) as f32).exp().is_finite());
                }
                Dtype::F64 => {
                    assert!((t - 709.78).abs() < 0.01);
                    assert!((t + 1.0).exp().is_infinite());
                }
            }
        }
        assert_eq!("f32".parse::<Dtype>().unwrap(), Dtype::F32);
        assert!("bf16".parse::<Dtype>().is_err());
    }
}
