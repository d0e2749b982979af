//! Pluggable parallel map over owned work items.
//!
//! The engine hands each particle to a worker and collects them back in
//! index order, so any `Executor` implementation yields identical results;
//! threading (or not) is purely a throughput decision made by the caller.
//! The companion CLI crate provides a thread-pool implementation; this crate
//! only ships the sequential one so it stays `no_std`.

use alloc::vec::Vec;

/// Applies `f` to every item and returns results in the items' order.
pub trait Executor {
    fn map_owned<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialExecutor;

impl Executor for SerialExecutor {
    fn map_owned<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync,
    {
        items.into_iter().map(f).collect()
    }
}
