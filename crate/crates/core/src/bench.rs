//! Equivalence checks, gradient checks and workspace/runtime sweeps.
//!
//! Everything here is deterministic except wall-clock timings. Inputs are
//! `N(0, 1)` draws from seeds `seed`, `seed + 1`, `seed + 2` for q, k, v.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::backward::chunked_attention_vjp;
use crate::chunked::{chunked_attention, query_chunking_only, ChunkParams};
use crate::error::AttnError;
use crate::gradcheck::{relative_error, FiniteDifference, Operand, FD_STEP};
use crate::memmeter::{measure, MemoryReport};
use crate::model::{self, ProblemShape};
use crate::reference::{naive_lazy_attention, reference_attention, reference_backward, AttnConfig};
use crate::streaming::streaming_self_attention;
use crate::tensor::{max_abs_diff, AttnTensor, Dtype, Element};

pub const CSV_HEADER: &str =
    "mode,n,heads,dim,query_chunk,key_chunk,dtype,peak_workspace_floats,wall_ms,macs,max_abs_diff";

pub const F64_TOLERANCE: f64 = 1e-10;
pub const F32_TOLERANCE: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const ANALYTIC_TOLERANCE: f64 = 1e-10;

/// Sequence lengths used by the `--figure3` preset.
pub const FIGURE3_SIZES: [usize; 3] = [1 << 10, 1 << 12, 1 << 14];

pub fn tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => F32_TOLERANCE,
        Dtype::F64 => F64_TOLERANCE,
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Attn(#[from] AttnError),
}

impl From<crate::error::ArenaError> for BenchError {
    fn from(e: crate::error::ArenaError) -> Self {
        BenchError::Attn(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Standard,
    LazyNaive,
    Streaming,
    Chunked,
    QueryChunkOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Standard, Mode::LazyNaive, Mode::Streaming, Mode::Chunked, Mode::QueryChunkOnly];

    pub fn label(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::LazyNaive => "lazy_naive",
            Mode::Streaming => "streaming",
            Mode::Chunked => "chunked",
            Mode::QueryChunkOnly => "query_chunk_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.label() == s).ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkPolicy {
    Fixed,
    /// Key chunk = floor(sqrt(n)).
    SqrtN,
}

impl FromStr for ChunkPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(ChunkPolicy::Fixed),
            "sqrt_n" => Ok(ChunkPolicy::SqrtN),
            other => Err(format!("unknown chunk policy `{other}` (expected fixed or sqrt_n)")),
        }
    }
}

pub fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Timing is the median over this many runs.
    pub repetitions: usize,
    pub modes: Vec<Mode>,
    pub sizes: Vec<usize>,
    pub heads: usize,
    pub dim: usize,
    pub dtype: Dtype,
    pub query_chunk: usize,
    pub key_chunk: usize,
    pub chunk_policy: ChunkPolicy,
    pub max_workspace_floats: Option<usize>,
    /// Constant added to every attention score through an extra feature.
    pub score_offset: f64,
    pub threads: usize,
    pub figure3: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let params = ChunkParams::default();
        Self {
            seed: 0,
            repetitions: 5,
            modes: Mode::ALL.to_vec(),
            sizes: vec![1024],
            heads: 1,
            dim: 64,
            dtype: Dtype::F32,
            query_chunk: params.query_chunk_size,
            key_chunk: params.key_chunk_size,
            chunk_policy: ChunkPolicy::Fixed,
            max_workspace_floats: None,
            score_offset: 0.0,
            threads: 1,
            figure3: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let usage = |m: &str| Err(BenchError::Usage(m.to_string()));
        if self.repetitions == 0 {
            return usage("--reps must be at least 1");
        }
        if self.heads == 0 || self.dim == 0 {
            return usage("--heads and --dim must be at least 1");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return usage("--n must list sequence lengths of at least 1");
        }
        if self.query_chunk == 0 || self.key_chunk == 0 {
            return usage("chunk sizes must be at least 1");
        }
        if self.modes.is_empty() {
            return usage("no modes selected");
        }
        if self.threads == 0 {
            return usage("--threads must be at least 1");
        }
        if !self.score_offset.is_finite() {
            return usage("--score-offset must be finite");
        }
        for &n in &self.sizes {
            let scores = n.checked_mul(n).and_then(|x| x.checked_mul(self.heads));
            let inputs = n.checked_mul(self.heads).and_then(|x| x.checked_mul(self.dim + 1));
            if scores.is_none() || inputs.is_none() {
                return usage("problem size overflows");
            }
        }
        Ok(())
    }

    pub fn chunk_params(&self, n: usize) -> ChunkParams {
        let key_chunk = match self.chunk_policy {
            ChunkPolicy::Fixed => self.key_chunk,
            ChunkPolicy::SqrtN => isqrt(n).max(1),
        };
        ChunkParams { query_chunk_size: self.query_chunk, key_chunk_size: key_chunk }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: Mode,
    pub n: usize,
    pub heads: usize,
    pub dim: usize,
    pub query_chunk: usize,
    pub key_chunk: usize,
    pub dtype: Dtype,
    /// `None` when the cell was skipped for exceeding the workspace budget.
    pub peak_workspace_floats: Option<usize>,
    pub wall_ms: Option<f64>,
    pub macs: Option<u64>,
    pub max_abs_diff: Option<f64>,
}

impl BenchRecord {
    pub fn skipped(&self) -> bool {
        self.peak_workspace_floats.is_none()
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<String>| x.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.n,
            self.heads,
            self.dim,
            self.query_chunk,
            self.key_chunk,
            self.dtype,
            self.peak_workspace_floats.map_or_else(|| "SKIPPED".to_string(), |p| p.to_string()),
            opt(self.wall_ms.map(|w| format!("{w:.3}"))),
            opt(self.macs.map(|m| m.to_string())),
            opt(self.max_abs_diff.map(|d| format!("{d:e}"))),
        )
    }
}

pub fn write_csv(records: &[BenchRecord], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Seeded self-attention inputs.
pub fn make_inputs<T: Element>(n: usize, heads: usize, dim: usize, seed: u64) -> Result<[AttnTensor<T>; 3], AttnError> {
    Ok([
        AttnTensor::random_normal((n, heads, dim), seed, 1.0)?,
        AttnTensor::random_normal((n, heads, dim), seed.wrapping_add(1), 1.0)?,
        AttnTensor::random_normal((n, heads, dim), seed.wrapping_add(2), 1.0)?,
    ])
}

/// Appends one feature so that every score grows by exactly `offset` and is
/// otherwise unchanged: keys get a 1, queries get `offset`. With query scaling
/// on, the query row is pre-multiplied by `sqrt(dim + 1)` over the new width so
/// that dividing by `sqrt(dim + 1)` recovers the original scaling.
pub fn inject_score_offset<T: Element>(
    q: &AttnTensor<T>,
    k: &AttnTensor<T>,
    offset: f64,
    cfg: &AttnConfig,
) -> Result<(AttnTensor<T>, AttnTensor<T>), AttnError> {
    let shape = q.shape();
    let wide = shape.dim + 1;
    let (rescale, q_extra) = if cfg.scale_queries {
        ((wide as f64 / shape.dim as f64).sqrt(), offset * (wide as f64).sqrt())
    } else {
        (1.0, offset)
    };
    let widen = |t: &AttnTensor<T>, factor: T, extra: T| {
        let s = t.shape();
        let mut data = Vec::with_capacity(s.seq * s.heads * wide);
        for i in 0..s.seq {
            for h in 0..s.heads {
                data.extend(t.row(i, h).iter().map(|&x| x * factor));
                data.push(extra);
            }
        }
        AttnTensor::from_vec((s.seq, s.heads, wide), data)
    };
    Ok((widen(q, T::from_f64(rescale), T::from_f64(q_extra))?, widen(k, T::one(), T::one())?))
}

/// Chunk sizes reported in the CSV for a mode.
fn reported_chunks(mode: Mode, n: usize, params: &ChunkParams) -> (usize, usize) {
    match mode {
        Mode::Standard => (n, n),
        Mode::LazyNaive | Mode::Streaming => (1, 1),
        Mode::Chunked => (params.query_chunk_size.min(n), params.effective_key_chunk(n)),
        Mode::QueryChunkOnly => (params.query_chunk_size.min(n), n),
    }
}

pub fn predicted_peak(mode: Mode, shape: &ProblemShape, params: &ChunkParams) -> usize {
    match mode {
        Mode::Standard => model::reference_peak(shape),
        Mode::LazyNaive => model::lazy_naive_peak(shape),
        Mode::Streaming => model::streaming_peak(shape),
        Mode::Chunked => model::chunked_peak(shape, params),
        Mode::QueryChunkOnly => model::query_chunking_peak(shape, params.query_chunk_size),
    }
}

fn run_mode<T: Element>(
    mode: Mode,
    inputs: &[AttnTensor<T>; 3],
    params: &ChunkParams,
    cfg: &AttnConfig,
) -> Result<(AttnTensor<T>, MemoryReport), AttnError> {
    let [q, k, v] = inputs;
    let (result, report) = measure(|arena| match mode {
        Mode::Standard => reference_attention(q, k, v, cfg, arena),
        Mode::LazyNaive => naive_lazy_attention(q, k, v, cfg, arena),
        Mode::Streaming => streaming_self_attention(q, k, v, cfg, arena),
        Mode::Chunked => chunked_attention(q, k, v, params, cfg, arena),
        Mode::QueryChunkOnly => query_chunking_only(q, k, v, params.query_chunk_size, cfg, arena),
    })?;
    Ok((result?, report))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// One benchmark cell: `mode` at length `n` with explicit chunk sizes.
#[derive(Debug, Clone, Copy)]
struct Cell {
    mode: Mode,
    n: usize,
    params: ChunkParams,
}

fn prepared_inputs<T: Element>(
    config: &RunConfig,
    n: usize,
    cfg: &AttnConfig,
) -> Result<[AttnTensor<T>; 3], AttnError> {
    let [q, k, v] = make_inputs::<T>(n, config.heads, config.dim, config.seed)?;
    if config.score_offset != 0.0 {
        let (q, k) = inject_score_offset(&q, &k, config.score_offset, cfg)?;
        Ok([q, k, v])
    } else {
        Ok([q, k, v])
    }
}

fn run_cell<T: Element>(config: &RunConfig, cell: Cell) -> Result<BenchRecord, AttnError> {
    let cfg = AttnConfig::default();
    let extra = usize::from(config.score_offset != 0.0);
    let shape =
        ProblemShape { n_q: cell.n, n_kv: cell.n, heads: config.heads, dim: config.dim + extra, value_dim: config.dim };
    let (query_chunk, key_chunk) = reported_chunks(cell.mode, cell.n, &cell.params);
    let mut record = BenchRecord {
        mode: cell.mode,
        n: cell.n,
        heads: config.heads,
        dim: config.dim,
        query_chunk,
        key_chunk,
        dtype: T::DTYPE,
        peak_workspace_floats: None,
        wall_ms: None,
        macs: None,
        max_abs_diff: None,
    };
    let within_budget = |peak: usize| config.max_workspace_floats.is_none_or(|b| peak <= b);
    if !within_budget(predicted_peak(cell.mode, &shape, &cell.params)) {
        return Ok(record);
    }

    let inputs = prepared_inputs::<T>(config, cell.n, &cfg)?;
    let mut times = Vec::with_capacity(config.repetitions);
    let mut last = None;
    for _ in 0..config.repetitions {
        let start = Instant::now();
        let (out, report) = run_mode(cell.mode, &inputs, &cell.params, &cfg)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        if let Some((_, prev)) = &last {
            debug_assert_eq!(*prev, report, "workspace accounting must be deterministic");
        }
        last = Some((out, report));
    }
    let (out, report) = last.expect("at least one repetition");
    record.peak_workspace_floats = Some(report.peak_floats);
    record.macs = Some(report.macs);
    record.wall_ms = Some(median(times));

    if cell.mode != Mode::Standard && within_budget(predicted_peak(Mode::Standard, &shape, &cell.params)) {
        let (reference, _) = run_mode(Mode::Standard, &inputs, &cell.params, &cfg)?;
        record.max_abs_diff = Some(max_abs_diff(&out, &reference)?);
    }
    Ok(record)
}

/// Budget-matched query chunking for one sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Figure3Plan {
    pub n: usize,
    /// Workspace of chunked attention with default chunk sizes.
    pub budget: usize,
    pub chunked: ChunkParams,
    /// Largest power-of-two query chunk (at most `n`) whose query-chunking
    /// workspace fits the budget.
    pub query_chunk_only: usize,
}

pub fn figure3_plan(n: usize, heads: usize, dim: usize, chunked: ChunkParams) -> Figure3Plan {
    let shape = ProblemShape::self_attention(n, heads, dim);
    let budget = model::chunked_peak(&shape, &chunked);
    let mut qc = 1usize;
    while qc * 2 <= n && model::query_chunking_peak(&shape, qc * 2) <= budget {
        qc *= 2;
    }
    Figure3Plan { n, budget, chunked, query_chunk_only: qc }
}

fn cells(config: &RunConfig) -> Vec<Cell> {
    if config.figure3 {
        let defaults = ChunkParams { query_chunk_size: config.query_chunk, key_chunk_size: config.key_chunk };
        return config
            .sizes
            .iter()
            .flat_map(|&n| {
                let plan = figure3_plan(n, config.heads, config.dim, defaults);
                let qco = ChunkParams { query_chunk_size: plan.query_chunk_only, key_chunk_size: n };
                [
                    Cell { mode: Mode::Chunked, n, params: plan.chunked },
                    Cell { mode: Mode::QueryChunkOnly, n, params: qco },
                ]
            })
            .collect();
    }
    config
        .sizes
        .iter()
        .flat_map(|&n| config.modes.iter().map(move |&mode| Cell { mode, n, params: config.chunk_params(n) }))
        .collect()
}

fn run_cells<T: Element>(config: &RunConfig, cells: Vec<Cell>) -> Result<Vec<BenchRecord>, BenchError> {
    if config.threads <= 1 {
        return cells.into_iter().map(|c| run_cell::<T>(config, c).map_err(Into::into)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| BenchError::Usage(format!("cannot start {} threads: {e}", config.threads)))?;
    pool.install(|| cells.into_par_iter().map(|c| run_cell::<T>(config, c).map_err(Into::into)).collect())
}

/// Runs every (n, mode) cell, or the budget-matched pairs when `figure3` is set.
pub fn run_bench(config: &RunConfig) -> Result<Vec<BenchRecord>, BenchError> {
    config.validate()?;
    let cells = cells(config);
    match config.dtype {
        Dtype::F32 => run_cells::<f32>(config, cells),
        Dtype::F64 => run_cells::<f64>(config, cells),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub mode: Mode,
    pub n: usize,
    pub max_abs_diff: f64,
    pub finite: bool,
    /// Informational lines never fail the check.
    pub gating: bool,
    pub pass: bool,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match (self.gating, self.pass) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        write!(
            f,
            "{verdict} mode={} n={} max_abs_diff={:e}{}",
            self.mode,
            self.n,
            self.max_abs_diff,
            if self.finite { "" } else { " (non-finite output)" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub dtype: Dtype,
    pub tolerance: f64,
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| !l.gating || l.pass)
    }
}

fn check_typed<T: Element>(config: &RunConfig) -> Result<CheckReport, BenchError> {
    let cfg = AttnConfig::default();
    let tol = tolerance(T::DTYPE);
    let mut lines = Vec::new();
    for &n in &config.sizes {
        let inputs = prepared_inputs::<T>(config, n, &cfg)?;
        let params = config.chunk_params(n);
        let (reference, _) = run_mode(Mode::Standard, &inputs, &params, &cfg)?;
        for &mode in config.modes.iter().filter(|&&m| m != Mode::Standard) {
            let (out, _) = run_mode(mode, &inputs, &params, &cfg)?;
            let finite = out.all_finite();
            let diff = max_abs_diff(&out, &reference)?;
            let gating = mode != Mode::LazyNaive;
            lines.push(CheckLine { mode, n, max_abs_diff: diff, finite, gating, pass: finite && diff <= tol });
        }
    }
    Ok(CheckReport { dtype: T::DTYPE, tolerance: tol, lines })
}

/// Compares every non-standard mode with the reference on seeded inputs.
pub fn run_check(config: &RunConfig) -> Result<CheckReport, BenchError> {
    config.validate()?;
    match config.dtype {
        Dtype::F32 => check_typed::<f32>(config),
        Dtype::F64 => check_typed::<f64>(config),
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub sizes: Vec<usize>,
    pub heads: usize,
    pub dim: usize,
    pub seed: u64,
    pub dtype: Dtype,
    pub params: ChunkParams,
    /// Finite-difference probes per operand; 0 probes every entry.
    pub fd_samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64],
            heads: 1,
            dim: 64,
            seed: 0,
            dtype: Dtype::F64,
            params: ChunkParams::default(),
            fd_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckLine {
    pub n: usize,
    pub operand: Operand,
    pub max_abs_vs_reference: f64,
    pub max_rel_vs_fd: f64,
    pub max_abs_value: f64,
    pub probes: usize,
}

impl GradCheckLine {
    pub fn pass(&self) -> bool {
        self.max_abs_vs_reference <= ANALYTIC_TOLERANCE && self.max_rel_vs_fd <= FD_TOLERANCE
    }
}

impl fmt::Display for GradCheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} n={} {} vs_reference={:e} vs_fd_rel={:e} max_abs={:e} probes={}",
            if self.pass() { "PASS" } else { "FAIL" },
            self.n,
            self.operand.label(),
            self.max_abs_vs_reference,
            self.max_rel_vs_fd,
            self.max_abs_value,
            self.probes
        )
    }
}

/// Indices probed for an operand with `len` entries.
pub fn probe_indices(len: usize, samples: usize) -> Vec<usize> {
    if samples == 0 || samples >= len {
        (0..len).collect()
    } else {
        (0..samples).map(|s| s * len / samples).collect()
    }
}

/// Gradient check with loss = sum of all outputs.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<Vec<GradCheckLine>, BenchError> {
    if config.dtype != Dtype::F64 {
        return Err(BenchError::Usage("gradcheck runs in f64 only".into()));
    }
    if config.heads == 0 || config.dim == 0 || config.sizes.is_empty() || config.sizes.contains(&0) {
        return Err(BenchError::Usage("sizes, heads and dim must be at least 1".into()));
    }
    config.params.validate()?;
    let cfg = AttnConfig::default();
    let mut lines = Vec::new();
    for &n in &config.sizes {
        let [q, k, v] = make_inputs::<f64>(n, config.heads, config.dim, config.seed)?;
        let d_out = AttnTensor::new((n, config.heads, config.dim), 1.0)?;
        let (fast, _) = measure(|arena| chunked_attention_vjp(&q, &k, &v, &d_out, &config.params, &cfg, arena))?;
        let fast = fast?;
        let (exact, _) = measure(|arena| reference_backward(&q, &k, &v, &d_out, &cfg, arena))?;
        let exact = exact?;
        let params = config.params;
        let mut fd = FiniteDifference::new(&q, &k, &v, &d_out, FD_STEP, |q, k, v| {
            let arena = crate::memmeter::WorkspaceArena::new();
            chunked_attention(q, k, v, &params, &cfg, &arena)
        });
        for operand in Operand::ALL {
            let grad = operand.grad(&fast);
            let indices = probe_indices(grad.len(), config.fd_samples);
            let mut worst = 0.0f64;
            for &idx in &indices {
                let numeric = fd.partial(operand, idx)?;
                worst = worst.max(relative_error(grad.data()[idx], numeric));
            }
            lines.push(GradCheckLine {
                n,
                operand,
                max_abs_vs_reference: max_abs_diff(grad, operand.grad(&exact))?,
                max_rel_vs_fd: worst,
                max_abs_value: grad.data().iter().fold(0.0f64, |a, x| a.max(x.abs())),
                probes: indices.len(),
            });
        }
    }
    Ok(lines)
}
