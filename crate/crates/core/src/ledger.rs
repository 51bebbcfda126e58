//! Exact accounting of forward passes, backward passes and parameter updates.
//!
//! Every full-model forward, every reverse traversal of a tape and every SGD
//! update appends a sequence-numbered event. Perturbation updates in free
//! training are logged too so that update ordering can be audited, but they
//! have no counter of their own.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Forward,
    Backward,
    SgdUpdate,
    PerturbationUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub kind: EventKind,
}

/// Counter snapshot of a ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounts {
    pub forward: u64,
    pub backward: u64,
    pub sgd_update: u64,
}

#[derive(Debug, Default)]
struct Inner {
    counts: LedgerCounts,
    events: Vec<LedgerEvent>,
}

/// Thread-safe cost ledger. Recording takes `&self`, so one ledger can be
/// shared by evaluators running on read-only parameter snapshots.
#[derive(Debug, Default)]
pub struct CostLedger {
    inner: Mutex<Inner>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: EventKind) -> u64 {
        let mut inner = self.inner.lock().expect("ledger poisoned");
        let seq = inner.events.len() as u64;
        match kind {
            EventKind::Forward => inner.counts.forward += 1,
            EventKind::Backward => inner.counts.backward += 1,
            EventKind::SgdUpdate => inner.counts.sgd_update += 1,
            EventKind::PerturbationUpdate => {}
        }
        inner.events.push(LedgerEvent { seq, kind });
        seq
    }

    pub fn record_forward(&self) -> u64 {
        self.record(EventKind::Forward)
    }

    pub fn record_backward(&self) -> u64 {
        self.record(EventKind::Backward)
    }

    pub fn record_sgd_update(&self) -> u64 {
        self.record(EventKind::SgdUpdate)
    }

    pub fn record_perturbation_update(&self) -> u64 {
        self.record(EventKind::PerturbationUpdate)
    }

    pub fn counts(&self) -> LedgerCounts {
        self.inner.lock().expect("ledger poisoned").counts
    }

    pub fn forward_count(&self) -> u64 {
        self.counts().forward
    }

    pub fn backward_count(&self) -> u64 {
        self.counts().backward
    }

    pub fn sgd_update_count(&self) -> u64 {
        self.counts().sgd_update
    }

    pub fn events(&self) -> Vec<LedgerEvent> {
        self.inner.lock().expect("ledger poisoned").events.clone()
    }

    /// Number of logged events of `kind`.
    pub fn count_kind(&self, kind: EventKind) -> u64 {
        let inner = self.inner.lock().expect("ledger poisoned");
        inner.events.iter().filter(|e| e.kind == kind).count() as u64
    }

    /// Checks that each counter equals the number of its events in the log.
    pub fn is_consistent(&self) -> bool {
        let c = self.counts();
        c.forward == self.count_kind(EventKind::Forward)
            && c.backward == self.count_kind(EventKind::Backward)
            && c.sgd_update == self.count_kind(EventKind::SgdUpdate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_track_event_log() {
        let ledger = CostLedger::new();
        ledger.record_forward();
        ledger.record_backward();
        ledger.record_sgd_update();
        ledger.record_perturbation_update();
        ledger.record_forward();
        let c = ledger.counts();
        assert_eq!((c.forward, c.backward, c.sgd_update), (2, 1, 1));
        assert!(ledger.is_consistent());
        let seqs: Vec<u64> = ledger.events().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
    }
}
