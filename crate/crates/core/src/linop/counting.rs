use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{LinearMap, SharedMap};

/// Shared forward/adjoint call counters.
#[derive(Debug, Default)]
pub struct OpCounter {
    forward: AtomicU64,
    adjoint: AtomicU64,
}

impl OpCounter {
    pub fn forward(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn adjoint(&self) -> u64 {
        self.adjoint.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.forward() + self.adjoint()
    }

    pub fn reset(&self) {
        self.restore(0, 0);
    }

    /// Rewinds to earlier readings, e.g. to leave bookkeeping work such as
    /// validation probes out of the totals.
    pub fn restore(&self, forward: u64, adjoint: u64) {
        self.forward.store(forward, Ordering::Relaxed);
        self.adjoint.store(adjoint, Ordering::Relaxed);
    }
}

/// Wraps a map and counts every application of it and its adjoint.
pub struct CountingMap {
    inner: SharedMap,
    counter: Arc<OpCounter>,
}

impl CountingMap {
    pub fn new(inner: SharedMap) -> Self {
        Self { inner, counter: Arc::new(OpCounter::default()) }
    }

    pub fn counter(&self) -> Arc<OpCounter> {
        self.counter.clone()
    }
}

impl LinearMap for CountingMap {
    fn domain_dim(&self) -> usize {
        self.inner.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.inner.codomain_dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.counter.forward.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        self.counter.adjoint.fetch_add(1, Ordering::Relaxed);
        self.inner.adjoint_apply(y)
    }
    fn name(&self) -> String {
        self.inner.name()
    }
}

/// Negative control: the adjoint's output is cyclically shifted by one
/// entry. Self-adjoint maps such as masks and symmetric blurs would pass a
/// "transpose omitted" corruption, a shift breaks every nontrivial map.
pub struct CorruptedAdjoint {
    inner: SharedMap,
}

impl CorruptedAdjoint {
    pub fn new(inner: SharedMap) -> Self {
        Self { inner }
    }
}

impl LinearMap for CorruptedAdjoint {
    fn domain_dim(&self) -> usize {
        self.inner.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.inner.codomain_dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.inner.apply(x)
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        let mut v = self.inner.adjoint_apply(y);
        v.rotate_right(1);
        v
    }
    fn name(&self) -> String {
        format!("corrupted-adjoint({})", self.inner.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::identity;

    #[test]
    fn counts_calls() {
        let c = CountingMap::new(Arc::new(identity(3)));
        let counter = c.counter();
        c.apply(&[1.0, 2.0, 3.0]);
        c.apply(&[1.0, 2.0, 3.0]);
        c.adjoint_apply(&[1.0, 2.0, 3.0]);
        assert_eq!((counter.forward(), counter.adjoint()), (2, 1));
        counter.reset();
        assert_eq!(counter.total(), 0);
    }
}
