//! Live-activation accounting.
//!
//! Activation buffers register their size while alive; the meter tracks the
//! current and the peak total. Tests use it to check that invertible
//! backpropagation holds at most one block's activations at a time.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
}

#[derive(Clone, Debug, Default)]
pub struct MemoryMeter {
    inner: Arc<Counters>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self, bytes: usize) -> MeterGuard {
        let now = self.inner.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.inner.peak.fetch_max(now, Ordering::SeqCst);
        MeterGuard { meter: self.clone(), bytes }
    }

    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.inner.peak.store(self.current(), Ordering::SeqCst);
    }

    /// Wraps `data` so that its size counts against this meter until dropped.
    pub fn track<T>(&self, data: Vec<T>) -> Tracked<T> {
        let guard = self.acquire(data.len() * std::mem::size_of::<T>());
        Tracked { data, _guard: guard }
    }
}

#[derive(Debug)]
pub struct MeterGuard {
    meter: MemoryMeter,
    bytes: usize,
}

impl Drop for MeterGuard {
    fn drop(&mut self) {
        self.meter.inner.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// A buffer whose size is charged to a [`MemoryMeter`] while it lives.
#[derive(Debug)]
pub struct Tracked<T> {
    data: Vec<T>,
    _guard: MeterGuard,
}

impl<T> std::ops::Deref for Tracked<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> std::ops::DerefMut for Tracked<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_release() {
        let m = MemoryMeter::new();
        let a = m.track(vec![0u8; 100]);
        {
            let _b = m.track(vec![0u32; 10]);
            assert_eq!(m.current(), 140);
        }
        assert_eq!(m.current(), 100);
        assert_eq!(m.peak(), 140);
        drop(a);
        assert_eq!(m.current(), 0);
        m.reset_peak();
        assert_eq!(m.peak(), 0);
    }
}
