//! Workspace accounting.
//!
//! Every kernel takes its scratch buffers from a [`WorkspaceArena`], which
//! counts live scalars (not bytes) and remembers the peak. Inputs and outputs
//! never pass through the arena, so the peak is the workspace overhead of an
//! operation. Loop indices and shape metadata are not counted.
//!
//! The arena also carries two operation counters: multiply-accumulates and
//! score-block evaluations. Both are bumped by the kernels in bulk.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use crate::error::ArenaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocEventKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocEvent {
    pub tag: &'static str,
    pub size: usize,
    pub kind: AllocEventKind,
}

/// Raw accounting handle. Freeing the same handle twice is an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkspaceHandle {
    id: u64,
    size: usize,
}

impl WorkspaceHandle {
    pub fn size(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Default)]
pub struct WorkspaceArena {
    live: Cell<usize>,
    peak: Cell<usize>,
    next_id: Cell<u64>,
    handles: RefCell<HashMap<u64, (usize, &'static str)>>,
    log: Option<RefCell<Vec<AllocEvent>>>,
    macs: Cell<u64>,
    score_blocks: Cell<u64>,
}

impl WorkspaceArena {
    pub fn new() -> Self {
        Self::default()
    }

    /// Arena that also records every alloc/free event.
    pub fn with_log() -> Self {
        Self { log: Some(RefCell::new(Vec::new())), ..Self::default() }
    }

    pub fn live_floats(&self) -> usize {
        self.live.get()
    }

    pub fn peak_floats(&self) -> usize {
        self.peak.get()
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn score_blocks(&self) -> u64 {
        self.score_blocks.get()
    }

    #[inline]
    pub fn count_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    #[inline]
    pub fn count_score_block(&self) {
        self.score_blocks.set(self.score_blocks.get() + 1);
    }

    /// Accounts `size` scalars as live and returns the handle that frees them.
    pub fn alloc(&self, size: usize, tag: &'static str) -> WorkspaceHandle {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        let live = self.live.get() + size;
        self.live.set(live);
        if live > self.peak.get() {
            self.peak.set(live);
        }
        self.handles.borrow_mut().insert(id, (size, tag));
        self.record(tag, size, AllocEventKind::Alloc);
        WorkspaceHandle { id, size }
    }

    pub fn free(&self, handle: WorkspaceHandle) -> Result<(), ArenaError> {
        let removed = self.handles.borrow_mut().remove(&handle.id);
        match removed {
            Some((size, tag)) => {
                self.live.set(self.live.get() - size);
                self.record(tag, size, AllocEventKind::Free);
                Ok(())
            }
            None if handle.id < self.next_id.get() => Err(ArenaError::DoubleFree(handle.id)),
            None => Err(ArenaError::UnknownHandle(handle.id)),
        }
    }

    /// RAII accounting without a buffer.
    pub fn reserve(&self, size: usize, tag: &'static str) -> Reservation<'_> {
        Reservation { arena: self, handle: Some(self.alloc(size, tag)) }
    }

    /// Zero-initialized scratch buffer released on drop.
    pub fn scratch<T: Clone + Default>(&self, len: usize, tag: &'static str) -> Scratch<'_, T> {
        Scratch { buf: vec![T::default(); len], _reservation: self.reserve(len, tag) }
    }

    fn record(&self, tag: &'static str, size: usize, kind: AllocEventKind) {
        if let Some(log) = &self.log {
            log.borrow_mut().push(AllocEvent { tag, size, kind });
        }
    }

    pub fn events(&self) -> Vec<AllocEvent> {
        self.log.as_ref().map(|l| l.borrow().clone()).unwrap_or_default()
    }

    /// Allocation log as `tag,size,event` lines.
    pub fn dump_log(&self) -> String {
        let mut out = String::new();
        for e in self.events() {
            let kind = match e.kind {
                AllocEventKind::Alloc => "alloc",
                AllocEventKind::Free => "free",
            };
            let _ = writeln!(out, "{},{},{}", e.tag, e.size, kind);
        }
        out
    }
}

/// Live accounting entry, freed on drop.
#[derive(Debug)]
pub struct Reservation<'a> {
    arena: &'a WorkspaceArena,
    handle: Option<WorkspaceHandle>,
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        if let Some(handle) = self.handle.take() {
            self.arena.free(handle).expect("reservation freed twice");
        }
    }
}

/// Accounted scratch buffer.
#[derive(Debug)]
pub struct Scratch<'a, T> {
    buf: Vec<T>,
    _reservation: Reservation<'a>,
}

impl<T> Deref for Scratch<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.buf
    }
}

impl<T> DerefMut for Scratch<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub peak_floats: usize,
    pub macs: u64,
    pub score_blocks: u64,
}

/// Runs `op` against a fresh arena and reports its peak workspace.
///
/// Fails if anything is still live when `op` returns.
pub fn measure<R>(op: impl FnOnce(&WorkspaceArena) -> R) -> Result<(R, MemoryReport), ArenaError> {
    let arena = WorkspaceArena::new();
    let result = op(&arena);
    if arena.live_floats() != 0 {
        return Err(ArenaError::Leak { live: arena.live_floats() });
    }
    Ok((
        result,
        MemoryReport { peak_floats: arena.peak_floats(), macs: arena.macs(), score_blocks: arena.score_blocks() },
    ))
}
