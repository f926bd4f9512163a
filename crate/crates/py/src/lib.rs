//! Python module `memattn_py`: attention kernels on `[seq, heads, dim]`
//! numpy arrays (float32 or float64).

use memattn::bench::Mode;
use memattn::{AttnConfig, AttnError, AttnTensor, ChunkParams, Element, GradTriple, MemoryReport, WorkspaceArena};
use numpy::ndarray::Array3;
use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyTypeError, PyValueError};
use pyo3::prelude::*;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[derive(FromPyObject)]
enum Array<'py> {
    F64(PyReadonlyArray3<'py, f64>),
    F32(PyReadonlyArray3<'py, f32>),
}

enum Tensors {
    F64(Vec<AttnTensor<f64>>),
    F32(Vec<AttnTensor<f32>>),
}

fn to_tensor<T: Element + numpy::Element>(a: &PyReadonlyArray3<'_, T>) -> PyResult<AttnTensor<T>> {
    let view = a.as_array();
    let (s, h, d) = view.dim();
    AttnTensor::from_vec((s, h, d), view.iter().copied().collect()).map_err(value_error)
}

fn to_numpy<'py, T: Element + numpy::Element>(py: Python<'py>, t: AttnTensor<T>) -> PyResult<Bound<'py, PyArray3<T>>> {
    let s = t.shape();
    let array = Array3::from_shape_vec((s.seq, s.heads, s.dim), t.into_vec()).map_err(value_error)?;
    Ok(array.into_pyarray(py))
}

/// All arrays must share one dtype.
fn collect(arrays: Vec<Array<'_>>) -> PyResult<Tensors> {
    if arrays.iter().all(|a| matches!(a, Array::F64(_))) {
        let ts = arrays.iter().map(|a| match a {
            Array::F64(x) => to_tensor(x),
            Array::F32(_) => unreachable!(),
        });
        return Ok(Tensors::F64(ts.collect::<PyResult<_>>()?));
    }
    if arrays.iter().all(|a| matches!(a, Array::F32(_))) {
        let ts = arrays.iter().map(|a| match a {
            Array::F32(x) => to_tensor(x),
            Array::F64(_) => unreachable!(),
        });
        return Ok(Tensors::F32(ts.collect::<PyResult<_>>()?));
    }
    Err(PyTypeError::new_err("arrays must all be float32 or all float64"))
}

fn config(scale_queries: bool) -> AttnConfig {
    AttnConfig { scale_queries }
}

/// Workspace statistics of one call.
#[pyclass(frozen, get_all)]
#[derive(Debug, Clone)]
struct Workspace {
    peak_floats: usize,
    macs: u64,
    score_blocks: u64,
}

#[pymethods]
impl Workspace {
    fn __repr__(&self) -> String {
        format!("Workspace(peak_floats={}, macs={}, score_blocks={})", self.peak_floats, self.macs, self.score_blocks)
    }
}

impl From<MemoryReport> for Workspace {
    fn from(r: MemoryReport) -> Self {
        Workspace { peak_floats: r.peak_floats, macs: r.macs, score_blocks: r.score_blocks }
    }
}

fn forward<T: Element>(
    mode: Mode,
    t: &[AttnTensor<T>],
    params: &ChunkParams,
    cfg: &AttnConfig,
) -> Result<(AttnTensor<T>, MemoryReport), AttnError> {
    let (q, k, v) = (&t[0], &t[1], &t[2]);
    let (out, report) = memattn::measure(|arena: &WorkspaceArena| match mode {
        Mode::Standard => memattn::reference_attention(q, k, v, cfg, arena),
        Mode::LazyNaive => memattn::naive_lazy_attention(q, k, v, cfg, arena),
        Mode::Streaming => memattn::streaming_self_attention(q, k, v, cfg, arena),
        Mode::Chunked => memattn::chunked_attention(q, k, v, params, cfg, arena),
        Mode::QueryChunkOnly => memattn::query_chunking_only(q, k, v, params.query_chunk_size, cfg, arena),
    })?;
    Ok((out?, report))
}

fn run<'py>(
    py: Python<'py>,
    mode: Mode,
    arrays: Vec<Array<'py>>,
    params: ChunkParams,
    scale_queries: bool,
) -> PyResult<(Bound<'py, PyAny>, Workspace)> {
    let cfg = config(scale_queries);
    params.validate().map_err(value_error)?;
    match collect(arrays)? {
        Tensors::F64(t) => {
            let (out, r) = py.detach(|| forward(mode, &t, &params, &cfg)).map_err(value_error)?;
            Ok((to_numpy(py, out)?.into_any(), r.into()))
        }
        Tensors::F32(t) => {
            let (out, r) = py.detach(|| forward(mode, &t, &params, &cfg)).map_err(value_error)?;
            Ok((to_numpy(py, out)?.into_any(), r.into()))
        }
    }
}

fn params(query_chunk_size: usize, key_chunk_size: usize) -> ChunkParams {
    ChunkParams { query_chunk_size, key_chunk_size }
}

/// Softmax attention through the full score matrix.
#[pyfunction]
#[pyo3(signature = (q, k, v, scale_queries = true))]
fn reference_attention<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    scale_queries: bool,
) -> PyResult<Bound<'py, PyAny>> {
    Ok(run(py, Mode::Standard, vec![q, k, v], ChunkParams::default(), scale_queries)?.0)
}

/// Lazy softmax without max subtraction; overflows for large scores.
#[pyfunction]
#[pyo3(signature = (q, k, v, scale_queries = true))]
fn naive_lazy_attention<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    scale_queries: bool,
) -> PyResult<Bound<'py, PyAny>> {
    Ok(run(py, Mode::LazyNaive, vec![q, k, v], ChunkParams::default(), scale_queries)?.0)
}

/// One (key, value) pair at a time per query.
#[pyfunction]
#[pyo3(signature = (q, k, v, scale_queries = true))]
fn streaming_attention<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    scale_queries: bool,
) -> PyResult<Bound<'py, PyAny>> {
    Ok(run(py, Mode::Streaming, vec![q, k, v], ChunkParams::default(), scale_queries)?.0)
}

#[pyfunction]
#[pyo3(signature = (q, k, v, query_chunk_size = 1024, key_chunk_size = 4096, scale_queries = true))]
fn chunked_attention<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    query_chunk_size: usize,
    key_chunk_size: usize,
    scale_queries: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let p = params(query_chunk_size, key_chunk_size);
    Ok(run(py, Mode::Chunked, vec![q, k, v], p, scale_queries)?.0)
}

#[pyfunction]
#[pyo3(signature = (q, k, v, query_chunk_size, scale_queries = true))]
fn query_chunking_only<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    query_chunk_size: usize,
    scale_queries: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let p = params(query_chunk_size, 1);
    Ok(run(py, Mode::QueryChunkOnly, vec![q, k, v], p, scale_queries)?.0)
}

/// Runs `mode` ("standard", "lazy_naive", "streaming", "chunked",
/// "query_chunk_only") and returns `(output, Workspace)`.
#[pyfunction]
#[pyo3(signature = (mode, q, k, v, query_chunk_size = 1024, key_chunk_size = 4096, scale_queries = true))]
#[allow(clippy::too_many_arguments)]
fn measure<'py>(
    py: Python<'py>,
    mode: &str,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    query_chunk_size: usize,
    key_chunk_size: usize,
    scale_queries: bool,
) -> PyResult<(Bound<'py, PyAny>, Workspace)> {
    let mode: Mode = mode.parse().map_err(PyValueError::new_err)?;
    run(py, mode, vec![q, k, v], params(query_chunk_size, key_chunk_size), scale_queries)
}

type Grads<'py> = (Bound<'py, PyAny>, Bound<'py, PyAny>, Bound<'py, PyAny>);

fn grads_to_numpy<'py, T: Element + numpy::Element>(py: Python<'py>, g: GradTriple<T>) -> PyResult<Grads<'py>> {
    Ok((to_numpy(py, g.dq)?.into_any(), to_numpy(py, g.dk)?.into_any(), to_numpy(py, g.dv)?.into_any()))
}

fn backward<'py>(
    py: Python<'py>,
    arrays: Vec<Array<'py>>,
    chunks: Option<ChunkParams>,
    scale_queries: bool,
) -> PyResult<(Grads<'py>, Workspace)> {
    fn go<T: Element>(
        t: &[AttnTensor<T>],
        chunks: Option<ChunkParams>,
        cfg: &AttnConfig,
    ) -> Result<(GradTriple<T>, MemoryReport), AttnError> {
        let (q, k, v, d_out) = (&t[0], &t[1], &t[2], &t[3]);
        let (g, report) = memattn::measure(|arena| match &chunks {
            Some(p) => memattn::chunked_attention_vjp(q, k, v, d_out, p, cfg, arena),
            None => memattn::reference_backward(q, k, v, d_out, cfg, arena),
        })?;
        Ok((g?, report))
    }
    let cfg = config(scale_queries);
    match collect(arrays)? {
        Tensors::F64(t) => {
            let (g, r) = py.detach(|| go(&t, chunks, &cfg)).map_err(value_error)?;
            Ok((grads_to_numpy(py, g)?, r.into()))
        }
        Tensors::F32(t) => {
            let (g, r) = py.detach(|| go(&t, chunks, &cfg)).map_err(value_error)?;
            Ok((grads_to_numpy(py, g)?, r.into()))
        }
    }
}

/// Gradients `(dq, dk, dv)` of `<d_out, attention(q, k, v)>` via the chunked
/// backward pass, plus its workspace.
#[pyfunction]
#[pyo3(signature = (q, k, v, d_out, query_chunk_size = 1024, key_chunk_size = 4096, scale_queries = true))]
#[allow(clippy::too_many_arguments)]
fn chunked_attention_vjp<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    d_out: Array<'py>,
    query_chunk_size: usize,
    key_chunk_size: usize,
    scale_queries: bool,
) -> PyResult<(Grads<'py>, Workspace)> {
    let p = params(query_chunk_size, key_chunk_size);
    p.validate().map_err(value_error)?;
    backward(py, vec![q, k, v, d_out], Some(p), scale_queries)
}

/// Same as `chunked_attention_vjp` through the full probability matrix.
#[pyfunction]
#[pyo3(signature = (q, k, v, d_out, scale_queries = true))]
fn reference_backward<'py>(
    py: Python<'py>,
    q: Array<'py>,
    k: Array<'py>,
    v: Array<'py>,
    d_out: Array<'py>,
    scale_queries: bool,
) -> PyResult<(Grads<'py>, Workspace)> {
    backward(py, vec![q, k, v, d_out], None, scale_queries)
}

/// Seeded N(0, std^2) array of shape `(seq, heads, dim)`.
#[pyfunction]
#[pyo3(signature = (shape, seed, std = 1.0, dtype = "float64"))]
fn random_normal<'py>(
    py: Python<'py>,
    shape: (usize, usize, usize),
    seed: u64,
    std: f64,
    dtype: &str,
) -> PyResult<Bound<'py, PyAny>> {
    match dtype {
        "float64" | "f64" => {
            let t = AttnTensor::<f64>::random_normal(shape, seed, std).map_err(value_error)?;
            Ok(to_numpy(py, t)?.into_any())
        }
        "float32" | "f32" => {
            let t = AttnTensor::<f32>::random_normal(shape, seed, std).map_err(value_error)?;
            Ok(to_numpy(py, t)?.into_any())
        }
        other => Err(PyValueError::new_err(format!("unsupported dtype {other:?}"))),
    }
}

#[pymodule]
#[pyo3(name = "memattn_py")]
pub fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Workspace>()?;
    m.add_function(wrap_pyfunction!(reference_attention, m)?)?;
    m.add_function(wrap_pyfunction!(naive_lazy_attention, m)?)?;
    m.add_function(wrap_pyfunction!(streaming_attention, m)?)?;
    m.add_function(wrap_pyfunction!(chunked_attention, m)?)?;
    m.add_function(wrap_pyfunction!(query_chunking_only, m)?)?;
    m.add_function(wrap_pyfunction!(measure, m)?)?;
    m.add_function(wrap_pyfunction!(chunked_attention_vjp, m)?)?;
    m.add_function(wrap_pyfunction!(reference_backward, m)?)?;
    m.add_function(wrap_pyfunction!(random_normal, m)?)?;
    Ok(())
}
