//! Exact softmax attention with small workspace.
//!
//! * [`reference`]: textbook attention (full score matrix), the unstable
//!   lazy-softmax form, and the analytic backward pass.
//! * [`streaming`]: one (key, value) pair at a time with a running max;
//!   workspace independent of sequence length.
//! * [`chunked`]: query blocks times key blocks with per-block summaries and
//!   a final global-max rescale; `O(sqrt n)` workspace with
//!   `key_chunk_size = sqrt(n)`.
//! * [`backward`]: gradients of the chunked forward that recompute score
//!   blocks instead of storing them.
//! * [`memmeter`]: scratch arena that counts live scalars so the workspace of
//!   every path can be compared exactly; [`model`] predicts those counts.
//! * [`bench`]: equivalence checks, gradient checks and CSV sweeps behind the
//!   `memattn` command line tool.
//!
//! All tensors are `[seq, heads, dim]`, row-major.

pub mod backward;
pub mod bench;
pub mod chunked;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod memmeter;
pub mod model;
pub mod reference;
pub mod rng;
pub mod streaming;
pub mod tensor;

pub use backward::{
    chunked_attention_backward, chunked_attention_vjp, chunked_attention_with_residuals, BackwardWorkspace,
};
pub use chunked::{
    chunked_attention, query_chunk_attention, query_chunking_only, summarize_chunk, ChunkParams, ChunkSummary,
};
pub use error::{ArenaError, AttnError, Result};
pub use memmeter::{measure, MemoryReport, WorkspaceArena};
pub use reference::{
    naive_lazy_attention, reference_attention, reference_backward, softmax_weights, AttnConfig, GradTriple,
};
pub use streaming::{single_query_attention, stream_init, streaming_self_attention, SoftmaxState};
pub use tensor::{max_abs_diff, AttnTensor, Dtype, Element, Shape, TensorView};
